"""Flat `key = value` run configuration with strict key checking."""

from __future__ import annotations

from dataclasses import dataclass, fields


def _bool(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("true", "yes", "1", "on"):
        return True
    if s.lower() in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass
class RunConfig:
    # data
    dataset: str = ""
    crop_side: int = 38
    train_fraction: float = 0.9
    split_seed: int = 0
    # model
    d_id: int = 256
    d_pose: int = 2
    d_z: int = 16
    base_channels: int = 32
    lc_hidden: int = 64
    # optimization
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    # loss weights
    w_adv: float = 1.0
    w_cycle: float = 10.0
    w_fool: float = 0.5
    w_id: float = 1.0
    w_pose_d: float = 1.0
    secondary_adversarial: bool = True
    lc_steps: int = 1
    lc_learning_rate: float = 0.0  # 0 means: use learning_rate
    fool_mode: str = "uniform"  # "uniform": push LC to p=0.5; "flip": inverted labels
    # discriminator hold gate
    d_hold_threshold: float = 0.75
    d_acc_window: int = 50
    # bookkeeping
    checkpoint_every: int = 1
    # evaluation
    eval_seed: int = 1234
    probe_steps: int = 200
    tsne_perplexity: float = 15.0
    tsne_iterations: int = 500

    def validate(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.5 < self.d_hold_threshold < 1.0:
            raise ValueError("d_hold_threshold must be in (0.5, 1)")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        for name in ("w_adv", "w_cycle", "w_fool", "w_id", "w_pose_d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        return self

    def resolved_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_CASTS = {int: int, float: float, str: str, bool: _bool}


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; unknown keys are an error."""
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected `key = value`: {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _CASTS[types[key]](value))
        except ValueError as e:
            raise ValueError(f"config line {lineno}: bad value for {key}: {e}")
    return cfg.validate()


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
