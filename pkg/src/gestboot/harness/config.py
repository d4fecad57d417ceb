"""Flat ``key = value`` configuration files.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Values stay strings until read through a typed accessor, so a snapshot of
the resolved configuration can be written back verbatim into reports.
The ``GESTBOOT_SEED`` environment variable overrides ``seed``.
"""
import os
from pathlib import Path

from ..errors import ConfigError

SEED_ENV = "GESTBOOT_SEED"

# Defaults for the end-to-end pipeline. Paths left empty mean "synthesize".
DEFAULTS = {
    "seed": "0",
    "variant": "normal",
    "height": "96",
    "width": "128",
    "videos": "1",
    "phase_frames": "30",
    "test_frames": "40",
    "test_videos": "2",
    "jitter": "0",
    "calib_dir": "",
    "test_dir": "",
    "test_mask_dir": "",
    "background_dir": "",
    "gesture_params": "",
    "gesture_users": "6",
    "eval_users": "2",
    "gesture_epochs": "20",
    "gesture_lr": "0.05",
    "gesture_inputs": "bgsub+optx+opty",
    "mc_samples": "100",
    "eps_var": "1e-4",
    "binary_labels": "true",
    "label_corruption": "0",
    "corruption_prob": "0.5",
    "appearance_epochs": "20",
    "appearance_lr": "0.3",
    "grad_clip": "0.1",
    "appearance_dropout": "fc6,conv5,conv4",
    "dropout_ratio": "0.4",
    "alpha": "0.5",
    "use_precision": "true",
    "augment": "transform,brightness,background",
    "background_frames": "30",
    "threshold": "0.5",
    "out_dir": "gestboot_out",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines into an insertion-ordered dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not key.replace("_", "").replace("-", "").isalnum():
            raise ConfigError(key, f"{source}:{lineno}: invalid key {key!r}")
        if key in out:
            raise ConfigError(key, f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


class Config:
    """Resolved settings with typed, key-reporting accessors.

    When ``defaults`` is given, keys it does not know are rejected so that
    a misspelled setting cannot silently fall back to its default.
    """

    base_dir = Path(".")

    def __init__(self, values, defaults=None):
        if defaults:
            for key in values:
                if key not in defaults:
                    raise ConfigError(key, f"unknown configuration key {key!r}")
        self.values = dict(defaults or {})
        self.values.update(values)

    @classmethod
    def load(cls, path, defaults=DEFAULTS, environ=None):
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read config file {path}: {exc}") from exc
        cfg = cls.from_text(text, defaults, environ, source=str(path))
        cfg.base_dir = path.parent
        return cfg

    @classmethod
    def from_text(cls, text, defaults=DEFAULTS, environ=None, source="<config>"):
        cfg = cls(parse_config_text(text, source), defaults)
        cfg.apply_env(os.environ if environ is None else environ)
        return cfg

    def apply_env(self, environ):
        seed = environ.get(SEED_ENV)
        if seed is not None and seed.strip():
            self.values["seed"] = seed.strip()
        self.get_int("seed")

    def _raw(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(key, f"missing configuration key {key!r}") from None

    def get_str(self, key):
        return self._raw(key)

    def get_int(self, key, minimum=None):
        raw = self._raw(key)
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(key, f"{key} = {raw!r} is not an integer") from None
        if minimum is not None and value < minimum:
            raise ConfigError(key, f"{key} = {value} must be >= {minimum}")
        return value

    def get_float(self, key):
        raw = self._raw(key)
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(key, f"{key} = {raw!r} is not a number") from None

    def get_bool(self, key):
        raw = self._raw(key).lower()
        if raw in _TRUE:
            return True
        if raw in _FALSE:
            return False
        raise ConfigError(key, f"{key} = {raw!r} is not a boolean")

    def get_list(self, key):
        return [item.strip() for item in self._raw(key).split(",") if item.strip()]

    def get_path(self, key):
        """Path value resolved against the config file's directory; ``None`` if empty."""
        raw = self._raw(key)
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def with_values(self, **changes):
        cfg = Config({k: str(v) for k, v in changes.items()}, self.values)
        cfg.base_dir = self.base_dir
        return cfg

    def snapshot(self):
        return dict(self.values)

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.values.items())
