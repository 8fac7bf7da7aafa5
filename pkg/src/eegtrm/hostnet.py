"""ShallowConvNet-style host classifier, optionally fronted by a TRM.

Pipeline: temporal conv -> spatial conv across all channels -> square ->
mean pool over time -> safe log -> dropout -> dense logits. The TRM, when
present, sits in front and hands the host a tensor of the raw input's shape.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError
from .montage import Montage
from .numerics import (
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    MeanPoolTime,
    SafeLog,
    Sequential,
    Square,
    ensure_finite,
)
from .trm import TrmModule


@dataclass(frozen=True)
class HostNetConfig:
    n_classes: int
    n_temporal_filters: int = 40
    temporal_kernel_len: int = 25
    pool_len: int = 75
    pool_stride: int = 15
    dropout_p: float = 0.5

    def __post_init__(self) -> None:
        for name in ("n_classes", "n_temporal_filters", "temporal_kernel_len", "pool_len", "pool_stride"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("dropout_p must lie in [0, 1)")

    def min_time_points(self) -> int:
        return self.temporal_kernel_len + self.pool_len - 1

    def n_pooled(self, time_points: int) -> int:
        return (time_points - self.temporal_kernel_len + 1 - self.pool_len) // self.pool_stride + 1


class ClassifierModel:
    """``[B x C x TP]`` -> ``[B x n_classes]`` logits."""

    def __init__(
        self,
        config: HostNetConfig,
        n_channels: int,
        time_points: int,
        trm: TrmModule | None = None,
        seed: int = 0,
        dtype=np.float32,
    ) -> None:
        if time_points < config.min_time_points():
            raise ValidationError(
                f"{time_points} time points is too short: temporal kernel {config.temporal_kernel_len} "
                f"plus pool {config.pool_len} needs at least {config.min_time_points()}"
            )
        self.config = config
        self.n_channels = n_channels
        self.time_points = time_points
        self.n_classes = config.n_classes
        self.dtype = np.dtype(dtype)
        self.trm = trm
        rng = np.random.default_rng(seed)
        F = config.n_temporal_filters
        n_pool = config.n_pooled(time_points)
        self.host = Sequential(
            [
                ("temporal", Conv2d(1, F, (1, config.temporal_kernel_len), bias=True, rng=rng, dtype=dtype)),
                ("spatial", Conv2d(F, F, (n_channels, 1), bias=False, rng=rng, dtype=dtype)),
                ("square", Square()),
                ("pool", MeanPoolTime(config.pool_len, config.pool_stride)),
                ("log", SafeLog()),
                ("dropout", Dropout(config.dropout_p, rng=np.random.default_rng(rng.integers(2**63)))),
                ("flatten", Flatten()),
                ("dense", Dense(F * n_pool, config.n_classes, rng=rng, dtype=dtype)),
            ]
        )

    # -- passes ---------------------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        if x.ndim != 3 or x.shape[1:] != (self.n_channels, self.time_points):
            raise ValidationError(
                f"model expects B x {self.n_channels} x {self.time_points} input, got {x.shape}"
            )
        x = ensure_finite(np.asarray(x, dtype=self.dtype), "model input")
        if self.trm is not None:
            x = self.trm.forward(x, training)
        logits = self.host.forward(x[:, None, :, :], training)
        return ensure_finite(logits, "logits")

    def backward(self, grad: np.ndarray) -> np.ndarray:
        g = self.host.backward(grad)[:, 0]
        if self.trm is not None:
            g = self.trm.backward(g)
        return g

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return np.concatenate(
            [self.forward(x[i : i + batch_size], training=False).argmax(axis=1) for i in range(0, len(x), batch_size)]
        )

    # -- parameters -----------------------------------------------------------

    def _parts(self):
        parts = []
        if self.trm is not None:
            parts.append(("trm", self.trm))
        parts.append(("host", self.host))
        return parts

    def zero_grad(self) -> None:
        for _, part in self._parts():
            part.zero_grad()

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, part in self._parts() for k, v in part.parameters().items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, part in self._parts() for k, v in part.gradients().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{p}.{n}.{k}": v
            for p, part in self._parts()
            for n, layer in part.layers
            for k, v in layer.buffers.items()
        }

    def buffer_arrays(self):
        return list(self.buffers().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        live = {**self.parameters(), **self.buffers()}
        missing = set(live) - set(state)
        unexpected = set(state) - set(live)
        if missing or unexpected:
            raise ValidationError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for k, v in state.items():
            if live[k].shape != np.shape(v):
                raise ValidationError(f"shape mismatch for {k}: {np.shape(v)} vs {live[k].shape}")
            live[k][...] = v

    def trm_params(self) -> int:
        return 0 if self.trm is None else self.trm.n_trainable()

    def host_params(self) -> int:
        return self.host.n_trainable()

    @property
    def total_trainable_params(self) -> int:
        return self.host_params() + self.trm_params()

    # -- reporting ------------------------------------------------------------

    def summary_rows(self) -> list[dict]:
        rows = []
        shape: tuple[int, ...] = (self.n_channels, self.time_points)
        if self.trm is not None:
            for name, layer in self.trm.layers:
                if isinstance(layer, Conv2d):
                    step = self.trm.schedule.steps[int(name[4:])]
                    shape = (self.n_channels, step.out_h, step.out_w)
                rows.append({"layer": f"trm.{name}", "output_shape": "x".join(map(str, shape)),
                             "params": layer.n_trainable()})
            rows.append({"layer": "trm.reassemble", "output_shape": f"{self.n_channels}x{self.time_points}",
                         "params": 0})
        cfg = self.config
        F = cfg.n_temporal_filters
        t_conv = self.time_points - cfg.temporal_kernel_len + 1
        n_pool = cfg.n_pooled(self.time_points)
        shapes = {
            "temporal": (F, self.n_channels, t_conv),
            "spatial": (F, 1, t_conv),
            "square": (F, 1, t_conv),
            "pool": (F, 1, n_pool),
            "log": (F, 1, n_pool),
            "dropout": (F, 1, n_pool),
            "flatten": (F * n_pool,),
            "dense": (cfg.n_classes,),
        }
        for name, layer in self.host.layers:
            rows.append({"layer": f"host.{name}", "output_shape": "x".join(map(str, shapes[name])),
                         "params": layer.n_trainable()})
        return rows

    def summary_text(self) -> str:
        rows = self.summary_rows()
        lines = [f"{'layer':<18}{'output (per sample)':<22}{'params':>10}"]
        lines += [f"{r['layer']:<18}{r['output_shape']:<22}{r['params']:>10}" for r in rows]
        lines.append(f"{'total':<40}{self.total_trainable_params:>10}")
        return "\n".join(lines)

    def summary_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["layer", "output_shape", "params"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.summary_rows())
        return buf.getvalue()

    def describe(self) -> dict:
        return {
            "host": asdict(self.config),
            "n_channels": self.n_channels,
            "time_points": self.time_points,
            "trm_k": None if self.trm is None else self.trm.schedule.base_k,
            "dtype": self.dtype.name,
        }


def build_model(
    config: HostNetConfig,
    n_channels: int,
    time_points: int,
    montage: Montage | None = None,
    trm_k: int | None = None,
    seed: int = 0,
    dtype=np.float32,
) -> ClassifierModel:
    """Assemble raw->host or raw->TRM->host.

    Parameters are initialised from ``seed``: the TRM (if any) first, then the
    host, so the host's initial weights do not depend on whether a TRM is used.
    """
    trm = None
    if trm_k is not None:
        if trm_k not in (3, 5):
            raise ValidationError(f"trm_k must be 3, 5 or None, got {trm_k!r}")
        if montage is None:
            raise ValidationError("a TRM front end needs a montage")
        if montage.n_channels != n_channels:
            raise ValidationError(
                f"montage {montage.name!r} has {montage.n_channels} channels, data has {n_channels}"
            )
        trm = TrmModule(montage, trm_k, rng=np.random.default_rng([seed, 1]), dtype=dtype)
    return ClassifierModel(config, n_channels, time_points, trm=trm, seed=seed, dtype=dtype)


def model_forward(model: ClassifierModel, x: np.ndarray, training: bool = False) -> np.ndarray:
    return model.forward(x, training)
