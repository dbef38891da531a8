"""traceobf: execution-trace obfuscation for NN computational graphs.

The pipeline: build or load a Graph, search for an ObfuscationPlan with
run_ga against trained attacker models, apply it with apply_plan, and audit
the result through the analytical cost model and the stealing testbed.
"""

from .graph import (
    COMPLEX_KINDS,
    Graph,
    Node,
    OperatorKind,
    TensorShape,
    dump_graph,
    infer_shapes,
    label_sequence,
    load_graph,
    topo_order,
    validate,
)
from .interpreter import equivalence_check, execute
from .transforms import (
    ObfuscationPlan,
    PlanEntry,
    add_dummy,
    apply_plan,
    branch_layer,
    deepen_layer,
    dump_plan,
    identity_plan,
    load_plan,
    skip_layer,
    widen_kernel,
    widen_layer,
)
from .fusion import Kernel, Schedule, default_schedule, fuse, modify_schedule
from .costmodel import (
    BUILTIN_PROFILES,
    DeviceProfile,
    LeakageCase,
    Trace,
    TraceStep,
    compile_graph,
    dump_trace,
    load_trace,
    profile_graph,
    profile_kernel,
    profile_pipeline,
)

__version__ = "0.1.0"
