"""Engine configuration: defaults, presets, and flat key=value files."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace


@dataclass
class EngineConfig:
    # Architecture. The backbone maps inputs to representations f; the
    # projector maps f to z, the space shared with the orthogonal bank.
    rep_dim: int = 16
    backbone_hidden: tuple = (64, 64)
    projector_hidden: tuple = (64,)

    # Training schedule.
    epochs_initial: int = 60
    epochs_projector: int = 60
    epochs_incremental: int = 30
    batch_size: int = 128
    lr_backbone: float = 1e-4
    lr_projector: float = 1e-3
    lr_prototypes: float = 1e-2

    # Margin contrastive loss on prototypes.
    alpha: float = 32.0
    sigma: float = 0.1

    # Known/novel splitting. epsilon may be the string "auto", which
    # calibrates the threshold from labeled data at the end of stage 0.
    epsilon: float | str = 0.0
    delta: float = 0.1
    split_own_weight: float = 0.5
    mlp_hidden: int = 32
    mlp_epochs: int = 50
    mlp_lr: float = 1e-3

    # Pools and discovery. A non-"median" preference is calibrated on the
    # labeled classes so pooled clustering matches their granularity.
    # normalize_f puts representations on the unit sphere, so distance
    # thresholds calibrated on labeled classes carry over to unseen ones.
    static_per_class: int = 10
    fine_k: int = 10
    confidence_cut: float = 0.9
    merge_grid_size: int = 50
    ap_damping: float = 0.9
    calibrate_preference: bool = False
    overcluster_factor: float = 1.0
    ap_quantile: float | None = None
    min_cluster_size: int = 1
    normalize_f: bool = False

    # Orthogonal bank.
    tau: float = 0.1
    include_self_term: bool = True
    ortho_steps: int = 2000
    ortho_lr: float = 0.01
    normalize_z: bool = True

    # Ablation switches: learnable prototypes, pooled joint discovery,
    # orthogonal incremental classification.
    ied: bool = True
    jdn: bool = True
    cio: bool = True

    seed: int = 0

    def __post_init__(self):
        if self.rep_dim < 2:
            raise ValueError("rep_dim must be at least 2")
        if isinstance(self.epsilon, str) and self.epsilon != "auto":
            raise ValueError("epsilon must be a float or 'auto'")
        for name in ("epochs_initial", "epochs_projector", "epochs_incremental",
                     "batch_size", "static_per_class", "fine_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.confidence_cut <= 1.0):
            raise ValueError("confidence_cut must lie in (0, 1]")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


def default_benchmark_config(seed: int = 0) -> EngineConfig:
    """Preset for the synthetic stream benchmark.

    Wider representation space leaves prototype capacity above the class
    count even if it gets over-estimated; the wide backbone keeps the replay
    pools tiny relative to the model; the split threshold is calibrated from
    the labeled batch instead of fixed. The light initial schedule keeps
    unseen-class blobs as compact as labeled ones so one clustering
    granularity serves both; the minimum-similarity exemplar preference
    (quantile 0) recovers the natural blob count of a pool independent of
    its size or composition, with stray below-threshold leakage absorbed by
    the cluster-size floor. Unnormalized projections let per-class logit
    margins grow, which anchors old classes firmly when fresh prototypes
    arrive.
    """
    return EngineConfig(
        rep_dim=32,
        backbone_hidden=(1280, 1280),
        projector_hidden=(64,),
        epochs_initial=8,
        epochs_incremental=90,
        epsilon="auto",
        delta=0.02,
        split_own_weight=0.85,
        fine_k=40,
        ap_quantile=0.0,
        min_cluster_size=6,
        normalize_z=False,
        seed=seed,
    )


_TUPLE_KEYS = {"backbone_hidden", "projector_hidden"}
_STR_OK = {"epsilon"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _TUPLE_KEYS:
        return tuple(int(p) for p in raw.split(",") if p.strip())
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    if key in _STR_OK:
        return raw
    raise ValueError(f"cannot parse config value {raw!r} for key {key!r}")


def parse_config_text(text: str, base: EngineConfig | None = None) -> EngineConfig:
    """Read ``key = value`` lines; '#' starts a comment; unknown keys fail."""
    cfg = base or EngineConfig()
    valid = {f.name for f in fields(cfg)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in valid:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        updates[key] = _parse_value(key, raw)
    return replace(cfg, **updates)


def load_config(path, base: EngineConfig | None = None) -> EngineConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), base)


def apply_overrides(cfg: EngineConfig, overrides: dict) -> EngineConfig:
    """Apply a {key: value} mapping on top of a config, validating keys."""
    valid = {f.name for f in fields(cfg)}
    clean = {}
    for key, value in overrides.items():
        if key not in valid:
            raise ValueError(f"unknown config key {key!r}")
        if value is None:
            continue
        clean[key] = value
    return replace(cfg, **clean)
