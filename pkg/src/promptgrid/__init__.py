"""promptgrid: visual in-context learning on 2x2 prompt grids.

A small, fully self-contained pipeline: a masked-grid inpainting backbone
over a discrete patch codebook, cross-attention fusion of multiple
retrieved prompts, arrangement-specific bottleneck adapters, and
bidirectional joint fine-tuning — all differentiated by the package's own
reverse-mode engine.
"""

from . import engine
from .adapters import AdapterConfig, AdapterParams, adapter_apply, select_preferred
from .backbone import (
    BackboneConfig,
    BackboneParams,
    Codebook,
    decode,
    forward_tokens,
    inpaint,
    pooled_feature,
    pretrain,
    quantize,
)
from .config import RunConfig, load_config
from .finetune import FinetunePlan, make_new_pair, swap_supports
from .fusion import FusedPair, FusionConfig, FusionParams, attention_weights, fuse
from .grid import (
    Arrangement,
    Canvas,
    Role,
    arrangement_by_id,
    arrangement_catalog,
    compose,
    extract,
)
from .inference import BundleMember, ModelBundle, predict_ensemble, predict_example
from .prompts import PromptPair, SupportPool, ingest, retrieve_topk
from .tasks import EvalResult, TaskSpec, evaluate, generate, miou, mse
from .training import train_stage1, train_stage2, train_stage3

__version__ = "0.1.0"
