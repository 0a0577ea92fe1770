"""Noisy input augmentation and binarized hidden-layer features."""
from __future__ import annotations

import csv
import hashlib
import io
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .gridworld import GridSpec, encode_one_hot
from .nn import Activation, Network, dumps, forward

FEATURE_WIDTH = 32


class NoiseMode(str, Enum):
    RESAMPLE = "resample"
    FIXED_PER_STATE = "fixed"


class FeatureMapWarning(UserWarning):
    pass


@dataclass
class NoiseAugmenter:
    """Appends ``n_noise`` uniform {0, 1} bits to an input vector.

    ``RESAMPLE`` draws fresh bits on every call from one seeded stream;
    ``FIXED_PER_STATE`` draws once per state and reuses them.
    """

    n_noise: int = 20
    seed: int = 0
    mode: NoiseMode = NoiseMode.RESAMPLE
    _rng: np.random.Generator = field(init=False, repr=False)
    _cache: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if self.n_noise < 0:
            raise ValueError("n_noise must be non-negative")
        self.mode = NoiseMode(self.mode)
        self._rng = np.random.default_rng(self.seed)

    def draw(self, state: int) -> np.ndarray:
        if self.mode is NoiseMode.FIXED_PER_STATE:
            if state not in self._cache:
                self._cache[state] = self._rng.integers(0, 2, self.n_noise).astype(float)
            return self._cache[state]
        return self._rng.integers(0, 2, self.n_noise).astype(float)


def augment(one_hot, aug: NoiseAugmenter | None, state: int | None = None) -> np.ndarray:
    x = np.asarray(one_hot, dtype=float)
    if aug is None or aug.n_noise == 0:
        return x.copy()
    if state is None:
        state = int(np.argmax(x))
    return np.concatenate([x, aug.draw(state)])


class NoisySource:
    """One-hot encoding followed by ``aug``'s noise bits."""

    def __init__(self, spec: GridSpec, aug: NoiseAugmenter):
        self.spec = spec
        self.aug = aug
        self.stochastic = aug.mode is NoiseMode.RESAMPLE and aug.n_noise > 0

    def __call__(self, s: int) -> np.ndarray:
        return augment(encode_one_hot(self.spec, s), self.aug, s)


def noisy_source(spec: GridSpec, aug: NoiseAugmenter) -> NoisySource:
    return NoisySource(spec, aug)


class FeatureSource:
    stochastic = False

    def __init__(self, fmap: StateFeatureMap):
        self.fmap = fmap

    def __call__(self, s: int) -> np.ndarray:
        return feature_input(self.fmap[s])


def binarize(activations) -> np.ndarray:
    """+1 where the activation is >= 0, else -1."""
    a = np.asarray(activations, dtype=float)
    return np.where(a >= 0, 1, -1).astype(np.int8)


@dataclass(frozen=True)
class FeatureVector:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (-1, 1) for b in bits):
            raise ValueError("feature bits must be +1 or -1")
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return len(self.bits)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=float)

    def signed_string(self) -> str:
        return "".join("+" if b > 0 else "-" for b in self.bits)

    @classmethod
    def from_signed_string(cls, text: str) -> FeatureVector:
        return cls(tuple(1 if ch == "+" else -1 for ch in text.strip()))


def hidden_layer(net: Network, layer_index: int) -> int:
    """Position in ``net.layers`` of the 1-based hidden layer ``layer_index``."""
    if not 1 <= layer_index < len(net.layers):
        raise ValueError(f"hidden layer {layer_index} does not exist")
    return layer_index - 1


def extract_features(net: Network, x, layer_index: int = 3) -> FeatureVector:
    pos = hidden_layer(net, layer_index)
    spec = net.layers[pos]
    if spec.fan_out != FEATURE_WIDTH:
        raise ValueError(f"extraction layer has width {spec.fan_out}, expected {FEATURE_WIDTH}")
    if spec.activation is not Activation.TANH:
        raise ValueError("features are only extracted from tanh layers")
    h = forward(net, x).post[pos][0]
    return FeatureVector(tuple(binarize(h)))


def feature_input(f: FeatureVector) -> np.ndarray:
    return f.as_array()


def checkpoint_id(net: Network) -> str:
    return hashlib.sha256(dumps(net).encode()).hexdigest()[:16]


@dataclass
class StateFeatureMap:
    spec: GridSpec
    entries: dict[int, FeatureVector]
    checkpoint: str = ""
    layer_index: int = 3
    noise_seed: int | None = None

    def __post_init__(self):
        missing = [s for s in self.spec.states if s not in self.entries]
        if missing:
            raise ValueError(f"feature map missing states {missing}")

    def __getitem__(self, s: int) -> FeatureVector:
        return self.entries[s]

    def collisions(self) -> list[tuple[int, int]]:
        seen: dict[FeatureVector, int] = {}
        pairs = []
        for s in self.spec.states:
            f = self.entries[s]
            if f in seen:
                pairs.append((seen[f], s))
            else:
                seen[f] = s
        return pairs

    @property
    def injective(self) -> bool:
        return not self.collisions()

    def inverse(self) -> dict[FeatureVector, int]:
        """Feature -> first state carrying it."""
        out: dict[FeatureVector, int] = {}
        for s in self.spec.states:
            out.setdefault(self.entries[s], s)
        return out

    def source(self) -> FeatureSource:
        """Input source for networks consuming this map's features."""
        return FeatureSource(self)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state_label", "bits"])
        for s in self.spec.states:
            w.writerow([self.spec.label(s), self.entries[s].signed_string()])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, spec: GridSpec, text: str, **provenance) -> StateFeatureMap:
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["state_label", "bits"]:
            raise ValueError("unexpected feature map header")
        entries = {spec.state_of(label): FeatureVector.from_signed_string(bits) for label, bits in rows[1:]}
        return cls(spec, entries, **provenance)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def build_state_feature_map(
    net: Network,
    spec: GridSpec,
    aug: NoiseAugmenter | None = None,
    layer_index: int = 3,
) -> StateFeatureMap:
    """One feature vector per state, one noise draw per state if noisy.

    A fixed-per-state copy of ``aug`` (same seed) supplies the draws, so the
    map is a function of the network and the seed only.
    """
    extractor = None
    if aug is not None and aug.n_noise > 0:
        extractor = NoiseAugmenter(aug.n_noise, aug.seed, NoiseMode.FIXED_PER_STATE)
    entries = {}
    for s in spec.states:
        x = augment(encode_one_hot(spec, s), extractor, s)
        entries[s] = extract_features(net, x, layer_index)
    fmap = StateFeatureMap(
        spec,
        entries,
        checkpoint=checkpoint_id(net),
        layer_index=layer_index,
        noise_seed=None if extractor is None else extractor.seed,
    )
    pairs = fmap.collisions()
    if pairs:
        labels = ", ".join(f"{spec.label(a)}={spec.label(b)}" for a, b in pairs)
        warnings.warn(f"feature map is not injective: {labels}", FeatureMapWarning, stacklevel=2)
    return fmap
