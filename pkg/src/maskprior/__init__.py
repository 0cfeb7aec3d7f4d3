"""Structural-prior coupling for masked-token decoding.

The package couples a per-position categorical potential grid (the
factorized output of a frozen denoiser) with a tractable structural prior, a
homogeneous hidden-Markov chain with an equivalent circuit form.  It
supports exact normalization of the product, exact joint and sequential
sampling, prior training on frozen potentials, and full generation loops,
all checked against brute-force enumeration oracles.
"""

from .circuit import (
    CircuitGraph,
    InputNode,
    ProductNode,
    SumNode,
    ValidationReport,
    build_hmm_circuit,
    circuit_log_partition,
    evaluate_log_likelihood,
    load_circuit,
    save_circuit,
    validate_structure,
)
from .coupling import (
    MaskedSequence,
    PotentialGrid,
    joint_log_prob,
    make_evidence,
    sample_alg1_simple,
    sample_joint_ao,
    sample_joint_latent,
)
from .decoding import (
    DecodeConfig,
    DecodeTrace,
    cover_windows,
    decode_block,
    decode_full,
    plan_unmask_counts,
    select_positions,
)
from .denoiser import (
    CountSource,
    FixedGridSource,
    OracleSource,
    PotentialRecord,
    PotentialSource,
    TemplateDistribution,
    UniformSource,
    load_potentials,
    oracle_potentials,
    train_count_denoiser,
    write_potentials,
)
from .errors import (
    ContradictionError,
    EnumerationBudgetError,
    FormatError,
    MalformedCircuitError,
)
from .harness import (
    CllCurve,
    CorpusSpec,
    GapReport,
    bench_overhead,
    brute_force_log_partition,
    cll_curve,
    exact_joint_table,
    gap_experiment,
    gen_corpus,
    load_corpus,
    misspec_gap,
    save_corpus,
    table_marginals,
)
from .hmm import (
    HmmParams,
    HmmPosteriors,
    VirtualEvidence,
    hmm_log_likelihood,
    hmm_log_partition,
    hmm_posteriors,
    hmm_sample_conditional,
    hmm_token_posteriors,
    load_hmm,
    save_hmm,
)
from .training import (
    NoiseDraw,
    TrainConfig,
    TrainExample,
    TrainingHistory,
    corrupt,
    objective,
    objective_gradient,
    precompute_potentials,
    train_prior,
)

__version__ = "0.1.0"
