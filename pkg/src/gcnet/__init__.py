"""Group-contextualization calibrators for video feature tensors."""
from .tensor import Tensor
from .calibrators import CalibratorSpec, GCConfig, chunk_assignment, gc_forward
from .backbone import NetworkSpec, build_network, forward_classify, network_spec, spec_from_options
from .accounting import CountReport, model_count, verify_against_enumeration

__version__ = "0.1.0"
