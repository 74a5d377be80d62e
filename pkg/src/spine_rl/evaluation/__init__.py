from .metrics import deviation_from_gs, gs_reference_metrics, length_per_volume, safe_rate

# the experiment drivers depend on the environment, which itself imports the
# metrics above; load them on first access to keep the import graph acyclic
_EXPERIMENT = {
    "EvalReport", "aggregate", "augment_anatomies", "episode_summary", "evaluate_policy",
    "leave_one_out", "recompute_rows", "run_experiment", "subject_anatomies",
}


def __getattr__(name):
    if name in _EXPERIMENT:
        from . import experiment

        return getattr(experiment, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = sorted(_EXPERIMENT | {"deviation_from_gs", "gs_reference_metrics", "length_per_volume", "safe_rate"})
