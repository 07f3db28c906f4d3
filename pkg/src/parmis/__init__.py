"""parmis: partition-parallel maximum independent set solver.

Pipeline: Louvain community partitioning -> independent per-subgraph training
of one-layer graph-convolution models against a quadratic selection loss ->
tabular Q-learning coordination of cross-subgraph conflicts via penalized
fine-tuning. Greedy and exact baselines plus a benchmark harness included.
"""

from .baselines import OracleSizeError, exact_mis, greedy_mis
from .coordinator import (
    ConflictSet,
    CoordinationAgent,
    CoordinatorConfig,
    GlobalMask,
    base_action_linear_cover,
    compute_reward,
    coordinate,
    detect_conflicts,
    select_actions,
    update_q,
)
from .gcn import (
    Hyperparams,
    SubgraphModel,
    TrainReport,
    fine_tune,
    forward,
    gradient,
    gumbel_softmax,
    init_model,
    load_checkpoint,
    loss,
    save_checkpoint,
    train,
)
from .graph import (
    EdgeListFormatError,
    Graph,
    Selection,
    SolutionMetrics,
    evaluate_solution,
    generate_regular,
    load_edge_list,
    repair_selection,
    write_edge_list,
)
from .partition import (
    CommunityAssignment,
    PartitionResult,
    extract_subgraphs,
    louvain,
    modularity,
    modularity_gain,
    modularity_gain_reference,
    partition_report,
)
from .pipeline import BENCH_COLUMNS, RunConfig, SolveReport, bench, solve
from .runtime import (
    RunManifest,
    StageError,
    TaskRecord,
    TrainTask,
    WorkerPool,
    assign_and_bucket,
    reconstruct_probabilities,
    run_stage1,
)

__version__ = "0.1.0"
