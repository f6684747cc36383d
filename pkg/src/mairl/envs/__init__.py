from .gems import GemsConfig, GemsEnv, GemsState, gems_encode, gems_step
from .matrix import MatrixGameConfig, MatrixGameEnv, MatrixState, matrix_step, random_matrix_game


def make_env(cfg: dict):
    """Build an environment from a config mapping with a ``type`` key."""
    cfg = dict(cfg)
    kind = cfg.pop("type", None)
    if kind == "gems":
        return GemsEnv(GemsConfig(**cfg))
    if kind == "matrix":
        return MatrixGameEnv(MatrixGameConfig(**cfg))
    raise ValueError(f"unknown env type {kind!r}")


__all__ = [
    "GemsConfig", "GemsEnv", "GemsState", "gems_encode", "gems_step",
    "MatrixGameConfig", "MatrixGameEnv", "MatrixState", "matrix_step",
    "random_matrix_game", "make_env",
]
