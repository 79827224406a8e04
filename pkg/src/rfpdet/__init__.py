"""Multi-dilation receptive-field pyramid detector, desk scale.

Numpy-backed reverse-mode tensors, a shared-weight multi-dilation block
with branch pooling, a six-level feature pyramid detector, an analytic
parameter/MAC cost model, a deterministic synthetic dataset, and a CLI.
"""

from .config import VERSION as __version__  # noqa: F401
from .errors import ConfigError, ContractError, DataError  # noqa: F401
from .rfp import RfpConfig, fold_for_inference, rfp_forward, rfp_param_count  # noqa: F401
from .tensor import Parameter, Tensor, backward, conv2d, mean_n, no_grad, sgd_step  # noqa: F401
