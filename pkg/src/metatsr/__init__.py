"""Meta-learning for time series regression: rolling meta-windows, MAML and
multimodal MAML with last-layer adaptation, and a sliding meta-testing
protocol."""
from .config import FinetuneConfig, MamlConfig, MetaTestConfig, MmamlConfig, NetConfig, PretrainConfig
from .errors import ConfigError, DataError, MetaTSRError, NumericalError
from .evaluation import (
    EvalResult,
    FinetuneAdapter,
    MamlAdapter,
    MmamlAdapter,
    TargetMeanAdapter,
    ablation_sweep,
    meta_test,
    select_finetune,
)
from .baselines import finetune_baseline, pretrain, target_mean_baseline
from .maml import inner_adapt, kernel_oracle_predict, meta_augment, meta_train
from .mmaml import ModulationNetwork, encode, kl_divergence, mmaml_meta_train, modulate, vae_loss
from .net import FilmParams, TaskNetwork, backward, forward, gradient_check
from .pipeline import PreparedData, prepare
from .series import (
    LongSeries,
    MetaWindow,
    VirtualTask,
    WindowSpec,
    generate_meta_windows,
    preprocess,
    rolling_window,
    summarize,
    virtual_tasks,
)
from .synthetic import synth_task_family

__version__ = "0.1.0"
