"""Electrode-to-grid montages and the scatter/gather mapping block.

A montage pins every EEG channel to one cell of an ``H x W`` grid. Mapping a
``[C x TP]`` recording through it yields an ``[H x W x TP]`` topographic tensor
where cells without an electrode hold 0 at every time point (no interpolation).

Montage files are JSON documents::

    {
      "name": "toy",
      "grid_height": 2,
      "grid_width": 2,
      "channels": [{"name": "Cz", "row": 0, "col": 1}, ...]
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class Montage:
    name: str
    grid_height: int
    grid_width: int
    channels: tuple[tuple[str, int, int], ...]

    def __post_init__(self) -> None:
        H, W = self.grid_height, self.grid_width
        if not (isinstance(H, int) and isinstance(W, int)) or H < 1 or W < 1:
            raise ValidationError(f"grid dims must be positive integers, got {H}x{W}")
        object.__setattr__(self, "channels", tuple((str(n), int(r), int(c)) for n, r, c in self.channels))
        if len(self.channels) == 0:
            raise ValidationError("montage has no channels")
        if len(self.channels) > H * W:
            raise ValidationError(f"{len(self.channels)} channels do not fit a {H}x{W} grid")
        names: set[str] = set()
        cells: set[tuple[int, int]] = set()
        for name, row, col in self.channels:
            if name in names:
                raise ValidationError(f"duplicate channel name {name!r}")
            if not (0 <= row < H and 0 <= col < W):
                raise ValidationError(f"channel {name!r} at ({row},{col}) is outside the {H}x{W} grid")
            if (row, col) in cells:
                raise ValidationError(f"duplicate cell ({row},{col}) for channel {name!r}")
            names.add(name)
            cells.add((row, col))

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def grid(self) -> tuple[int, int]:
        return self.grid_height, self.grid_width

    @property
    def channel_names(self) -> tuple[str, ...]:
        return tuple(n for n, _, _ in self.channels)

    @property
    def rows(self) -> np.ndarray:
        return np.array([r for _, r, _ in self.channels], dtype=np.intp)

    @property
    def cols(self) -> np.ndarray:
        return np.array([c for _, _, c in self.channels], dtype=np.intp)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "grid_height": self.grid_height,
            "grid_width": self.grid_width,
            "channels": [{"name": n, "row": r, "col": c} for n, r, c in self.channels],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def check_channel_names(self, names: Sequence[str] | None) -> None:
        """Raise unless ``names`` (if given) matches the montage order exactly."""
        if names is None:
            return
        names = tuple(names)
        if len(names) != self.n_channels:
            raise ValidationError(
                f"signal has {len(names)} channels, montage {self.name!r} has {self.n_channels}"
            )
        for i, (got, want) in enumerate(zip(names, self.channel_names)):
            if got != want:
                raise ValidationError(f"channel {i} is {got!r} in the signal but {want!r} in the montage")


def montage_from_dict(doc: dict) -> Montage:
    try:
        channels = tuple((ch["name"], ch["row"], ch["col"]) for ch in doc["channels"])
        for name, row, col in channels:
            if not isinstance(name, str) or type(row) is not int or type(col) is not int:
                raise ValidationError(f"bad channel entry {name!r}: name must be text, row/col integers")
        H, W = doc["grid_height"], doc["grid_width"]
        if type(H) is not int or type(W) is not int:
            raise ValidationError("grid_height and grid_width must be integers")
        return Montage(name=str(doc["name"]), grid_height=H, grid_width=W, channels=channels)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed montage document: {exc!r}") from None


def load_montage(path: str | Path) -> Montage:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"cannot parse montage {path}: {exc}") from None
    except OSError as exc:
        raise ValidationError(f"cannot read montage {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError(f"montage {path} is not a JSON object")
    return montage_from_dict(doc)


SHIPPED_MONTAGES = ("ebdsdd_55ch_7x9", "hgd_44ch_7x7", "toy_20ch_5x6")


def shipped_montage(name: str) -> Montage:
    """Load one of the montages bundled with the package (see ``SHIPPED_MONTAGES``)."""
    if name not in SHIPPED_MONTAGES:
        raise ValidationError(f"unknown shipped montage {name!r}; choose from {SHIPPED_MONTAGES}")
    text = resources.files("eegtrm").joinpath("montages", f"{name}.json").read_text(encoding="utf-8")
    return montage_from_dict(json.loads(text))


def compact_montage(grid_height: int, grid_width: int, n_channels: int, name: str = "compact") -> Montage:
    """Place ``n_channels`` electrodes on the cells nearest the grid centre.

    Cells are ranked by squared distance from the centre (row-major among
    ties) and channels are listed in row-major cell order, named ``E00``,
    ``E01``, ...
    """
    cy, cx = (grid_height - 1) / 2, (grid_width - 1) / 2
    cells = sorted(
        ((r, c) for r in range(grid_height) for c in range(grid_width)),
        key=lambda rc: ((rc[0] - cy) ** 2 + (rc[1] - cx) ** 2, rc),
    )
    if n_channels > len(cells):
        raise ValidationError(f"{n_channels} channels do not fit a {grid_height}x{grid_width} grid")
    chosen = sorted(cells[:n_channels])
    width = max(2, len(str(n_channels - 1)))
    return Montage(
        name=name,
        grid_height=grid_height,
        grid_width=grid_width,
        channels=tuple((f"E{i:0{width}d}", r, c) for i, (r, c) in enumerate(chosen)),
    )


@dataclass(frozen=True)
class TopographicTensor:
    """Read-only ``[H x W x TP]`` scalp image sequence."""

    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise ValidationError(f"topographic tensor must be 3-D, got shape {self.values.shape}")
        self.values.flags.writeable = False

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def time_points(self) -> int:
        return self.values.shape[2]


def _check_signal(signal: np.ndarray, montage: Montage) -> np.ndarray:
    signal = np.asarray(signal)
    if signal.ndim != 2:
        raise ValidationError(f"signal must be [channels x time], got shape {signal.shape}")
    if signal.shape[0] != montage.n_channels:
        raise ValidationError(
            f"signal has {signal.shape[0]} channels, montage {montage.name!r} has {montage.n_channels}"
        )
    return signal


def map_to_topographic(
    signal: np.ndarray, montage: Montage, channel_names: Sequence[str] | None = None
) -> TopographicTensor:
    """Scatter a ``[C x TP]`` signal onto the montage grid."""
    signal = _check_signal(signal, montage)
    montage.check_channel_names(channel_names)
    out = np.zeros((montage.grid_height, montage.grid_width, signal.shape[1]), dtype=signal.dtype)
    out[montage.rows, montage.cols, :] = signal
    return TopographicTensor(out)


def gather_from_topographic(tensor: TopographicTensor | np.ndarray, montage: Montage) -> np.ndarray:
    """Read the electrode cells back out, in montage channel order."""
    values = tensor.values if isinstance(tensor, TopographicTensor) else np.asarray(tensor)
    if values.ndim != 3 or values.shape[:2] != montage.grid:
        raise ValidationError(f"tensor shape {values.shape} does not match montage grid {montage.grid}")
    return values[montage.rows, montage.cols, :].copy()


def scatter_batch(x: np.ndarray, montage: Montage) -> np.ndarray:
    """``[N x C]`` channel vectors -> ``[N x 1 x H x W]`` grid images."""
    out = np.zeros((x.shape[0], 1, montage.grid_height, montage.grid_width), dtype=x.dtype)
    out[:, 0, montage.rows, montage.cols] = x
    return out


def gather_batch(grid: np.ndarray, montage: Montage) -> np.ndarray:
    """Adjoint of :func:`scatter_batch`: ``[N x 1 x H x W]`` -> ``[N x C]``."""
    return grid[:, 0, montage.rows, montage.cols]
