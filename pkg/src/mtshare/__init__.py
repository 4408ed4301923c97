"""Multi-task supermodel compiler and sharing-policy search for
prototxt-defined CNN backbones."""

from .errors import MtShareError
from .graph import OperatorGraph, build_graph, count_params, infer_shapes, topo_order
from .metrics import (MetricSet, ParamReport, export_policy_viz, overall_delta,
                      param_report, relative_performance, sharing_statistics)
from .pipeline import (SyntheticTaskSet, TrainConfig, evaluate, make_synthetic_tasks,
                       policy_train, post_train, pretrain, run_pipeline)
from .policy import (PolicyState, policy_regularization, sample_policy,
                     soft_policy, task_correlation, temperature_schedule, total_loss)
from .prototxt import LayerSpec, NetworkSpec, parse_network, pretty_print, validate_spec
from .rng import RngStreams
from .supermodel import (MultiTaskModel, Supermodel, TaskSpec, capacity_bounds,
                         compile_supermodel, derive_model, make_skip)

__version__ = "0.1.0"
