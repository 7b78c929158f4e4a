from .config import ConfigError, ExperimentConfig, validate_config
from .experiments import execute


def validate(config_path) -> list[str]:
    """All diagnostics for a config file; an empty list means runnable."""
    try:
        cfg = ExperimentConfig.load(config_path)
    except ConfigError as err:
        return err.diagnostics
    return validate_config(cfg)


def run(config_path, outdir=None, seed=None, threads=1, ensemble=None) -> dict:
    cfg = ExperimentConfig.load(config_path)
    if seed is not None:
        cfg.data["seed"] = int(seed)
    problems = validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    return execute(cfg, outdir, threads, ensemble)
