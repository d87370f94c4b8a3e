"""Per-modality MLP encoders/decoders, parameter registry, checkpoints.

Encoders map a modality to a diagonal-Gaussian posterior over the shared
latent space (plus a modality-specific style posterior in factorized
mode); decoders map latent draws back to likelihood parameters. Hidden
layers use softplus activations, which keeps every objective graph
smooth enough for tight finite-difference checks.

Checkpoints are bit-exact: magic "MOPO", version, a JSON header with the
config and a name/shape/offset table, then one contiguous little-endian
float64 payload covering parameters and optimizer moments.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import tensor as T
from .distributions import DiagonalGaussian, LikelihoodSpec
from .tensor import Tensor

__all__ = [
    "MissingStyle",
    "IoError",
    "VersionMismatch",
    "CorruptPayload",
    "ModalityConfig",
    "ModelConfig",
    "ParameterStore",
    "MultimodalVAE",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "init_params",
    "init_mlp",
    "mlp_forward",
    "expected_param_count",
    "restore_rng",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"MOPO"
CHECKPOINT_VERSION = 1

DEFAULT_HIDDEN = (128, 128)


class MissingStyle(ValueError):
    """Factorized decoder called without its style vector."""


class IoError(OSError):
    """Checkpoint file could not be read or written."""


class VersionMismatch(ValueError):
    """Checkpoint format version unsupported."""


class CorruptPayload(ValueError):
    """Checkpoint payload disagrees with its header table."""


class ModalityConfig:
    """Shape and likelihood of one modality."""

    __slots__ = ("input_dims", "hidden", "likelihood")

    def __init__(self, input_dims: int, likelihood: LikelihoodSpec, hidden=DEFAULT_HIDDEN):
        if input_dims <= 0:
            raise ValueError("input_dims must be positive")
        self.input_dims = int(input_dims)
        self.hidden = tuple(int(h) for h in hidden)
        self.likelihood = likelihood

    def to_dict(self) -> dict:
        return {
            "input_dims": self.input_dims,
            "hidden": list(self.hidden),
            "likelihood": {
                "kind": self.likelihood.kind,
                "data_dims": self.likelihood.data_dims,
                "weight": self.likelihood.weight,
                "variance": self.likelihood.variance,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityConfig":
        lk = d["likelihood"]
        return cls(
            d["input_dims"],
            LikelihoodSpec(lk["kind"], lk["data_dims"], lk["weight"], lk["variance"]),
            hidden=d["hidden"],
        )


class ModelConfig:
    """Latent sizes plus one ModalityConfig per modality."""

    __slots__ = ("latent_dim", "modalities", "factorized", "style_dim")

    def __init__(self, latent_dim: int, modalities, factorized: bool = False, style_dim: int = 0):
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not modalities:
            raise ValueError("at least one modality required")
        if factorized and style_dim <= 0:
            raise ValueError("factorized mode needs style_dim > 0")
        if style_dim < 0:
            raise ValueError("style_dim must be nonnegative")
        self.latent_dim = int(latent_dim)
        self.modalities = list(modalities)
        self.factorized = bool(factorized)
        self.style_dim = int(style_dim)

    @property
    def M(self) -> int:
        return len(self.modalities)

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "factorized": self.factorized,
            "style_dim": self.style_dim,
            "modalities": [m.to_dict() for m in self.modalities],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            d["latent_dim"],
            [ModalityConfig.from_dict(m) for m in d["modalities"]],
            factorized=d["factorized"],
            style_dim=d["style_dim"],
        )


class ParameterStore:
    """Ordered name -> Tensor map; insertion order is the optimizer order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(array, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def named(self, prefix: str) -> list[Tensor]:
        return [t for n, t in self._params.items() if n.startswith(prefix)]

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            raise ValueError("parameter name sets differ")
        for n, arr in state.items():
            t = self._params[n]
            if t.shape != arr.shape:
                raise ValueError(f"shape mismatch for {n}: {t.shape} vs {arr.shape}")
            t.data = np.array(arr, dtype=np.float64)


def init_mlp(store: ParameterStore, prefix: str, sizes, rng: np.random.Generator) -> None:
    """Linear stack parameters: W ~ U(+-1/sqrt(fan_in)), biases zero."""
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        store.add(f"{prefix}.W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{prefix}.b{i}", np.zeros(fan_out))


def mlp_forward(store: ParameterStore, prefix: str, n_layers: int, x: Tensor) -> Tensor:
    """Softplus-activated MLP; final layer stays linear."""
    h = x
    for i in range(n_layers):
        h = T.matmul(h, store[f"{prefix}.W{i}"]) + store[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            h = T.softplus(h)
    return h


class MultimodalVAE:
    """Encoder/decoder pair per modality over a shared parameter store."""

    def __init__(self, config: ModelConfig, seed: int | None = None, store: ParameterStore | None = None):
        self.config = config
        if store is not None:
            self.store = store
        else:
            if seed is None:
                raise ValueError("need a seed or an existing store")
            self.store = init_params(config, seed)

    def _check_input(self, j: int, x: Tensor) -> Tensor:
        expected = self.config.modalities[j].input_dims
        if x.shape[-1] != expected:
            raise T.ShapeMismatch(f"modality {j}: input dim {x.shape[-1]} != {expected}")
        return x if x.data.ndim > 1 else T.reshape(x, (1, x.shape[-1]))

    def encode(self, j: int, x) -> DiagonalGaussian | tuple[DiagonalGaussian, DiagonalGaussian]:
        """Posterior over the shared latent; plus the style posterior when
        factorized."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        squeeze = x.data.ndim == 1
        h = self._check_input(j, x)
        cfg = self.config
        n_layers = len(cfg.modalities[j].hidden) + 1
        out = mlp_forward(self.store, f"enc{j}", n_layers, h)
        L = cfg.latent_dim
        mu, lv = out[:, 0:L], out[:, L : 2 * L]
        if squeeze:
            mu, lv = T.reshape(mu, (L,)), T.reshape(lv, (L,))
        shared = DiagonalGaussian(mu, lv)
        if not cfg.factorized:
            return shared
        S = cfg.style_dim
        mu_s, lv_s = out[:, 2 * L : 2 * L + S], out[:, 2 * L + S : 2 * L + 2 * S]
        if squeeze:
            mu_s, lv_s = T.reshape(mu_s, (S,)), T.reshape(lv_s, (S,))
        return shared, DiagonalGaussian(mu_s, lv_s)

    def decode(self, j: int, z, style=None) -> Tensor:
        """Likelihood parameters for modality j given latent draw(s)."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        cfg = self.config
        if z.shape[-1] != cfg.latent_dim:
            raise T.ShapeMismatch(f"latent dim {z.shape[-1]} != {cfg.latent_dim}")
        if cfg.factorized:
            if style is None:
                raise MissingStyle(f"modality {j}: factorized decode needs a style vector")
            style = style if isinstance(style, Tensor) else Tensor(style)
            z = T.concat([z, style], axis=z.data.ndim - 1)
        squeeze = z.data.ndim == 1
        h = z if not squeeze else T.reshape(z, (1, z.shape[-1]))
        n_layers = len(cfg.modalities[j].hidden) + 1
        out = mlp_forward(self.store, f"dec{j}", n_layers, h)
        if squeeze:
            out = T.reshape(out, (out.shape[-1],))
        return out

    def parameters(self) -> list[Tensor]:
        return self.store.tensors()


def init_params(config: ModelConfig, seed: int) -> ParameterStore:
    """Fresh parameter store; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    enc_out = 2 * config.latent_dim + (2 * config.style_dim if config.factorized else 0)
    dec_in = config.latent_dim + (config.style_dim if config.factorized else 0)
    for j, mod in enumerate(config.modalities):
        sizes = (mod.input_dims,) + mod.hidden + (enc_out,)
        init_mlp(store, f"enc{j}", sizes, rng)
    for j, mod in enumerate(config.modalities):
        out_dim = mod.likelihood.data_dims
        sizes = (dec_in,) + tuple(reversed(mod.hidden)) + (out_dim,)
        init_mlp(store, f"dec{j}", sizes, rng)
    return store


def expected_param_count(config: ModelConfig) -> int:
    """Sum over layers of (fan_in + 1) * fan_out."""
    enc_out = 2 * config.latent_dim + (2 * config.style_dim if config.factorized else 0)
    dec_in = config.latent_dim + (config.style_dim if config.factorized else 0)
    total = 0
    for mod in config.modalities:
        sizes = (mod.input_dims,) + mod.hidden + (enc_out,)
        total += sum((sizes[i] + 1) * sizes[i + 1] for i in range(len(sizes) - 1))
        sizes = (dec_in,) + tuple(reversed(mod.hidden)) + (mod.likelihood.data_dims,)
        total += sum((sizes[i] + 1) * sizes[i + 1] for i in range(len(sizes) - 1))
    return total


class Checkpoint:
    """Deserialized checkpoint contents."""

    __slots__ = ("config", "params", "optimizer", "rng_state", "step")

    def __init__(self, config, params, optimizer, rng_state, step):
        self.config = config
        self.params = params
        self.optimizer = optimizer
        self.rng_state = rng_state
        self.step = step

    def restore_model(self) -> "MultimodalVAE":
        model = MultimodalVAE(self.config, seed=0)
        model.store.load_state(self.params)
        return model

    def restore_optimizer(self, params: list[Tensor]) -> T.OptimizerState | None:
        if self.optimizer is None:
            return None
        state = T.OptimizerState(self.optimizer["kind"], self.optimizer["learning_rate"])
        state.step_count = self.optimizer["step_count"]
        if "m" in self.optimizer:
            state.m = [np.array(a) for a in self.optimizer["m"]]
            state.v = [np.array(a) for a in self.optimizer["v"]]
        return state


def save_checkpoint(
    path,
    model: MultimodalVAE,
    optimizer: T.OptimizerState | None = None,
    rng: np.random.Generator | None = None,
    step: int = 0,
) -> None:
    """Write a bit-exact checkpoint (parameters, optimizer, RNG stream)."""
    entries: list[tuple[str, np.ndarray]] = [
        (n, model.store[n].data) for n in model.store.names()
    ]
    opt_header = None
    if optimizer is not None:
        opt_header = {
            "kind": optimizer.kind,
            "learning_rate": optimizer.learning_rate,
            "step_count": optimizer.step_count,
            "has_moments": optimizer.m is not None,
        }
        if optimizer.m is not None:
            for i, (m, v) in enumerate(zip(optimizer.m, optimizer.v)):
                entries.append((f"__opt_m__{i}", m))
                entries.append((f"__opt_v__{i}", v))

    table = []
    offset = 0
    for name, arr in entries:
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "config": model.config.to_dict(),
        "table": table,
        "payload_len": offset,
        "optimizer": opt_header,
        "rng_state": _rng_state_to_json(rng),
        "step": int(step),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<Q", len(header_bytes)))
            f.write(header_bytes)
            for _, arr in entries:
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptPayload("bad magic bytes")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version} != {CHECKPOINT_VERSION}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise CorruptPayload("truncated header")
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    payload = raw[16 + header_len :]
    expected = header["payload_len"] * 8
    if len(payload) != expected:
        raise CorruptPayload(f"payload is {len(payload)} bytes, table says {expected}")
    flat = np.frombuffer(payload, dtype="<f8")

    arrays: dict[str, np.ndarray] = {}
    for row in header["table"]:
        shape = tuple(row["shape"])
        size = int(np.prod(shape)) if shape else 1
        chunk = flat[row["offset"] : row["offset"] + size]
        if chunk.size != size:
            raise CorruptPayload(f"entry {row['name']} runs past payload end")
        arrays[row["name"]] = np.array(chunk, dtype=np.float64).reshape(shape)

    params = {n: a for n, a in arrays.items() if not n.startswith("__opt_")}
    optimizer = header["optimizer"]
    if optimizer is not None and optimizer.pop("has_moments"):
        n_moments = sum(1 for n in arrays if n.startswith("__opt_m__"))
        optimizer["m"] = [arrays[f"__opt_m__{i}"] for i in range(n_moments)]
        optimizer["v"] = [arrays[f"__opt_v__{i}"] for i in range(n_moments)]
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        optimizer=optimizer,
        rng_state=header["rng_state"],
        step=header["step"],
    )


def _rng_state_to_json(rng: np.random.Generator | None):
    if rng is None:
        return None
    return rng.bit_generator.state


def restore_rng(state) -> np.random.Generator | None:
    """Rebuild a Generator from a saved bit-generator state dict."""
    if state is None:
        return None
    cls = getattr(np.random, state["bit_generator"])
    bg = cls()
    bg.state = state
    return np.random.Generator(bg)
