from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .ensemble import SafeDistanceEnsemble, ensemble_stats
from .estimator import SafePPOAgent
from .networks import ActorCritic, VolumeEncoder
from .ppo import PPOConfig, RolloutBuffer, compute_gae, ppo_loss, ppo_update

__all__ = [
    "ActorCritic",
    "Checkpoint",
    "CheckpointError",
    "PPOConfig",
    "RolloutBuffer",
    "SafeDistanceEnsemble",
    "SafePPOAgent",
    "VolumeEncoder",
    "compute_gae",
    "ensemble_stats",
    "load_checkpoint",
    "ppo_loss",
    "ppo_update",
    "save_checkpoint",
]
