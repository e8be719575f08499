"""Padding-free sparse mixture-of-experts linear transforms on CPU.

Tokens are routed to top-k experts, grouped by a stable sort of their
scattered slots, transformed by fused gather/linear/scatter kernels that
never pad or copy whole activations, and combined with the routing weights.
The same machinery composes into a routed MLP and routed multi-head
attention, with naive oracles, exact gradients, and logical memory
accounting to verify every claim.
"""

from .accounting import AllocationLedger, LedgerEntry
from .core_tensor import (
    ExpertTensor,
    Matrix,
    WeightMatrix,
    matmul,
    seeded_random_expert_tensor,
    seeded_random_matrix,
)
from .errors import DimensionError
from .kernels import (
    GROUPED_TO_GROUPED,
    GROUPED_TO_SCATTERED,
    SCATTERED_TO_GROUPED,
    SCATTERED_TO_SCATTERED,
    LayoutFlag,
    TileConfig,
    add_macs,
    group,
    group_xty,
    mac_count,
    reset_mac_count,
    scatter2scatter,
    scatter_combine,
    set_fault_injection,
)
from .moe_layers import (
    MomhaConfig,
    MomhaWeights,
    SmoeMlpConfig,
    activation_grad,
    apply_activation,
    attention,
    attention_backward,
    init_momha_weights,
    init_smoe_mlp_weights,
    momha_backward,
    momha_forward,
    smoe_mlp_backward,
    smoe_mlp_forward,
)
from .parallel_linear import LinearContext, LinearGradients
from .parallel_linear import backward as parallel_linear_backward
from .parallel_linear import forward as parallel_linear_forward
from .router import (
    GroupedOrder,
    RoutingResult,
    assignment_routing,
    compute_grouped_order,
    gate_backward,
    gate_forward,
    softmax_rows,
    topk_select,
)

__version__ = "0.1.0"

__all__ = [
    "AllocationLedger",
    "LedgerEntry",
    "DimensionError",
    "Matrix",
    "WeightMatrix",
    "ExpertTensor",
    "matmul",
    "seeded_random_matrix",
    "seeded_random_expert_tensor",
    "LayoutFlag",
    "TileConfig",
    "SCATTERED_TO_SCATTERED",
    "SCATTERED_TO_GROUPED",
    "GROUPED_TO_SCATTERED",
    "GROUPED_TO_GROUPED",
    "scatter2scatter",
    "group",
    "group_xty",
    "scatter_combine",
    "mac_count",
    "reset_mac_count",
    "add_macs",
    "set_fault_injection",
    "RoutingResult",
    "GroupedOrder",
    "gate_forward",
    "softmax_rows",
    "topk_select",
    "compute_grouped_order",
    "gate_backward",
    "assignment_routing",
    "LinearContext",
    "LinearGradients",
    "parallel_linear_forward",
    "parallel_linear_backward",
    "SmoeMlpConfig",
    "smoe_mlp_forward",
    "smoe_mlp_backward",
    "init_smoe_mlp_weights",
    "MomhaConfig",
    "MomhaWeights",
    "init_momha_weights",
    "momha_forward",
    "momha_backward",
    "attention",
    "attention_backward",
    "apply_activation",
    "activation_grad",
    "__version__",
]
