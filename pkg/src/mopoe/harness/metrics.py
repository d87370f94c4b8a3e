"""Evaluation protocol: latent probes, coherence, importance-weighted
log-likelihoods.

The linear probe fits a multinomial logistic regression on 500 frozen
posterior means per conditioning subset and reports full-test-set
accuracy. Coherence judges are supervised MLP classifiers with the
encoder's trunk; they must clear a 0.95 test-accuracy gate before any
coherence number is considered meaningful. Log-likelihoods use the
subset posterior as the importance proposal, 15 samples by default.

All numbers are deterministic given (model state, dataset seed, eval
seed); sampling goes through explicitly passed generators only.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..distributions import LikelihoodSpec, recon_log_prob, rsample
from ..fusion import SubsetMask, enumerate_subsets, poe_fuse
from ..models import ParameterStore, init_mlp, mlp_forward
from ..oracle import diag_logpdf
from ..tensor import Tensor
from .dataset import SyntheticDataset

__all__ = [
    "TooFewSamples",
    "ClassifierTooWeak",
    "LogisticProbe",
    "CoherenceJudge",
    "EvalReport",
    "fit_logistic_probe",
    "subset_posterior_for",
    "linear_probe",
    "train_coherence_classifiers",
    "save_judges",
    "load_judges",
    "coherence",
    "importance_log_likelihood",
    "iwae_log_likelihood",
    "evaluate_model",
    "JUDGE_ACCURACY_GATE",
    "PROBE_TRAIN_SAMPLES",
    "IWAE_SAMPLES_DEFAULT",
]

JUDGE_ACCURACY_GATE = 0.95
PROBE_TRAIN_SAMPLES = 500
PROBE_RIDGE = 1e-4
PROBE_ITERS = 2000
PROBE_LR = 0.5
IWAE_SAMPLES_DEFAULT = 15

JUDGE_MAGIC = b"MOCL"


class TooFewSamples(ValueError):
    """Probe needs more training samples than the dataset provides."""


class ClassifierTooWeak(RuntimeError):
    """Judge accuracy below the validity gate; coherence would be noise."""


class LogisticProbe:
    """Multinomial logistic regression fit by full-batch gradient descent."""

    __slots__ = ("W", "b", "mean", "scale")

    def __init__(self, W, b, mean, scale):
        self.W = W
        self.b = b
        self.mean = mean
        self.scale = scale

    def predict(self, features: np.ndarray) -> np.ndarray:
        z = (features - self.mean) / self.scale
        return np.argmax(z @ self.W + self.b, axis=1)

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(features) == labels))


def fit_logistic_probe(
    features: np.ndarray,
    labels: np.ndarray,
    classes: int,
    ridge: float = PROBE_RIDGE,
    iters: int = PROBE_ITERS,
    lr: float = PROBE_LR,
) -> LogisticProbe:
    n, d = features.shape
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale[scale < 1e-8] = 1.0
    x = (features - mean) / scale
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), labels] = 1.0
    W = np.zeros((d, classes))
    b = np.zeros(classes)
    for _ in range(iters):
        logits = x @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / n
        W -= lr * (x.T @ err + ridge * W)
        b -= lr * err.sum(axis=0)
    return LogisticProbe(W, b, mean, scale)


def _shared_posterior(model, j, x):
    post = model.encode(j, x)
    return post[0] if isinstance(post, tuple) else post


def subset_posterior_for(model, xs: list[np.ndarray], subset) -> "DiagonalGaussian":
    """Fused posterior for one conditioning subset (indices or mask)."""
    indices = subset.indices() if isinstance(subset, SubsetMask) else list(subset)
    experts = [_shared_posterior(model, j, xs[j]) for j in indices]
    return poe_fuse(experts)


def linear_probe(
    model,
    train_ds: SyntheticDataset,
    test_ds: SyntheticDataset,
    rng: np.random.Generator,
    subsets=None,
    n_train: int = PROBE_TRAIN_SAMPLES,
    classes: int | None = None,
) -> dict[str, float]:
    """Test accuracy of a logistic probe on subset-posterior means."""
    if len(train_ds) < n_train:
        raise TooFewSamples(f"probe needs {n_train} samples, dataset has {len(train_ds)}")
    classes = classes or int(train_ds.labels.max()) + 1
    subsets = subsets or enumerate_subsets(model.config.M, "all_nonempty")
    pick = rng.choice(len(train_ds), size=n_train, replace=False)
    out = {}
    for mask in subsets:
        feats_train = subset_posterior_for(
            model, [x[pick] for x in train_ds.xs], mask
        ).mu.data
        feats_test = subset_posterior_for(model, test_ds.xs, mask).mu.data
        probe = fit_logistic_probe(feats_train, train_ds.labels[pick], classes)
        out[mask.label()] = probe.accuracy(feats_test, test_ds.labels)
    return out


class CoherenceJudge:
    """Supervised MLP classifier for one modality (encoder trunk + class head)."""

    __slots__ = ("store", "hidden", "input_dims", "classes", "test_accuracy")

    def __init__(self, store: ParameterStore, hidden, input_dims: int, classes: int, test_accuracy: float):
        self.store = store
        self.hidden = tuple(hidden)
        self.input_dims = input_dims
        self.classes = classes
        self.test_accuracy = test_accuracy

    def logits(self, x: np.ndarray) -> np.ndarray:
        out = mlp_forward(self.store, "clf", len(self.hidden) + 1, Tensor(x))
        return out.data

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)


def train_coherence_classifiers(
    train_ds: SyntheticDataset,
    test_ds: SyntheticDataset,
    rng: np.random.Generator,
    hidden=(128, 128),
    epochs: int = 12,
    batch_size: int = 128,
    learning_rate: float = 2e-3,
    accuracy_gate: float = JUDGE_ACCURACY_GATE,
    min_steps: int = 500,
) -> list[CoherenceJudge]:
    """One judge per modality, trained to the accuracy gate.

    Small datasets get extra epochs so every judge sees at least
    min_steps optimizer updates. Raises ClassifierTooWeak when any judge
    misses the gate; coherence rates measured by an unreliable judge
    would be meaningless.
    """
    classes = int(train_ds.labels.max()) + 1
    judges = []
    for j in range(train_ds.M):
        x_all = train_ds.xs[j]
        y_all = train_ds.labels
        store = ParameterStore()
        dims = x_all.shape[1]
        init_mlp(store, "clf", (dims,) + tuple(hidden) + (classes,), rng)
        opt = T.OptimizerState("adam", learning_rate)
        spec = LikelihoodSpec("categorical_logits", classes)
        params = store.tensors()
        n = len(y_all)
        steps_per_epoch = max(1, -(-n // batch_size))
        total_epochs = max(epochs, -(-min_steps // steps_per_epoch))
        for _ in range(total_epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                with T.Tape() as tape:
                    logits = mlp_forward(store, "clf", len(hidden) + 1, Tensor(x_all[idx]))
                    lp = recon_log_prob(spec, logits, y_all[idx])
                    loss = T.negate(T.tensor_mean(lp))
                grads = T.backward(tape, loss)
                grads = T.param_gradients(tape, grads, params)
                T.optimizer_step(opt, params, grads)
        judge = CoherenceJudge(store, hidden, dims, classes, 0.0)
        judge.test_accuracy = float(
            np.mean(judge.predict(test_ds.xs[j]) == test_ds.labels)
        )
        if judge.test_accuracy < accuracy_gate:
            raise ClassifierTooWeak(
                f"modality {j} judge reached {judge.test_accuracy:.3f} < {accuracy_gate}"
            )
        judges.append(judge)
    return judges


def save_judges(path, judges: list[CoherenceJudge]) -> None:
    entries = []
    blobs = []
    offset = 0
    for i, judge in enumerate(judges):
        for name in judge.store.names():
            arr = judge.store[name].data
            entries.append(
                {"judge": i, "name": name, "shape": list(arr.shape), "offset": offset}
            )
            offset += arr.size
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {
        "judges": [
            {
                "hidden": list(j.hidden),
                "input_dims": j.input_dims,
                "classes": j.classes,
                "test_accuracy": j.test_accuracy,
            }
            for j in judges
        ],
        "table": entries,
        "payload_len": offset,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(JUDGE_MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for blob in blobs:
            f.write(blob)


def load_judges(path) -> list[CoherenceJudge]:
    raw = Path(path).read_bytes()
    if raw[:4] != JUDGE_MAGIC:
        raise ValueError("bad judge file magic")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    flat = np.frombuffer(raw[12 + hlen :], dtype="<f8")
    if flat.size != header["payload_len"]:
        raise ValueError("judge payload truncated")
    judges = []
    for i, meta in enumerate(header["judges"]):
        store = ParameterStore()
        for row in header["table"]:
            if row["judge"] != i:
                continue
            shape = tuple(row["shape"])
            size = int(np.prod(shape)) if shape else 1
            store.add(row["name"], flat[row["offset"] : row["offset"] + size].reshape(shape))
        judges.append(
            CoherenceJudge(
                store, meta["hidden"], meta["input_dims"], meta["classes"], meta["test_accuracy"]
            )
        )
    return judges


def _require_strong(judges: list[CoherenceJudge]) -> None:
    for i, j in enumerate(judges):
        if j.test_accuracy < JUDGE_ACCURACY_GATE:
            raise ClassifierTooWeak(f"judge {i} accuracy {j.test_accuracy:.3f} below gate")


def _decode_bits(model, j: int, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Deterministic bitmap from decoder logits (maximum-probability pixel)."""
    if model.config.factorized:
        style = rng.standard_normal((z.shape[0], model.config.style_dim))
        logits = model.decode(j, Tensor(z), style=Tensor(style))
    else:
        logits = model.decode(j, Tensor(z))
    return (logits.data > 0.0).astype(np.float64)


def coherence(
    model,
    judges: list[CoherenceJudge],
    dataset: SyntheticDataset,
    mode: str,
    rng: np.random.Generator,
    subset=None,
    target: int | None = None,
    n_samples: int = 1000,
) -> float:
    """Fraction of generated samples the judges call coherent.

    conditional: encode the subset, sample the fused posterior, decode
    the target modality, and compare the judged label to the input
    label. joint: decode prior draws across all modalities and require
    unanimous judged labels.
    """
    _require_strong(judges)
    if mode == "conditional":
        if subset is None or target is None:
            raise ValueError("conditional coherence needs subset and target")
        post = subset_posterior_for(model, dataset.xs, subset)
        z = rsample(post, rng).data
        bits = _decode_bits(model, target, z, rng)
        pred = judges[target].predict(bits)
        return float(np.mean(pred == dataset.labels))
    if mode == "joint":
        z = rng.standard_normal((n_samples, model.config.latent_dim))
        preds = []
        for j in range(model.config.M):
            bits = _decode_bits(model, j, z, rng)
            preds.append(judges[j].predict(bits))
        preds = np.stack(preds, axis=0)
        unanimous = np.all(preds == preds[0], axis=0)
        return float(np.mean(unanimous))
    raise ValueError(f"unknown coherence mode {mode!r}")


def importance_log_likelihood(log_joint_fn, mu, log_var, S: int, rng: np.random.Generator) -> float:
    """Generic single-datapoint estimator: logsumexp of S importance
    weights from a diagonal-Gaussian proposal, minus log S."""
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    z = mu + np.exp(0.5 * log_var) * rng.standard_normal((S, mu.shape[-1]))
    lw = np.asarray(log_joint_fn(z), dtype=np.float64) - diag_logpdf(mu, log_var, z)
    m = lw.max()
    return float(m + math.log(np.mean(np.exp(lw - m))))


def _unweighted_specs(model) -> list[LikelihoodSpec]:
    out = []
    for mod in model.config.modalities:
        lk = mod.likelihood
        out.append(LikelihoodSpec(lk.kind, lk.data_dims, 1.0, lk.variance))
    return out


def iwae_log_likelihood(
    model,
    dataset: SyntheticDataset,
    rng: np.random.Generator,
    subsets=None,
    S: int = IWAE_SAMPLES_DEFAULT,
    batch_size: int = 250,
) -> dict[str, float]:
    """Mean per-sample log-likelihood estimate per conditioning subset.

    Unweighted likelihoods: reconstruction reweighting is a training
    device, not part of the generative density.
    """
    if model.config.factorized:
        raise ValueError("importance evaluation covers shared-latent models only")
    subsets = subsets or enumerate_subsets(model.config.M, "all_nonempty")
    specs = _unweighted_specs(model)
    out = {}
    n = len(dataset)
    for mask in subsets:
        total = 0.0
        for start in range(0, n, batch_size):
            xs = [x[start : start + batch_size] for x in dataset.xs]
            b = xs[0].shape[0]
            post = subset_posterior_for(model, xs, mask)
            mu, lv = post.mu.data, post.log_var.data
            lws = np.empty((S, b))
            for s in range(S):
                z = mu + np.exp(0.5 * lv) * rng.standard_normal(mu.shape)
                log_joint = np.sum(
                    -0.5 * np.log(2 * np.pi) - z**2 / 2.0, axis=-1
                )
                for j in range(model.config.M):
                    params = model.decode(j, Tensor(z))
                    log_joint = log_joint + recon_log_prob(specs[j], params, xs[j]).data
                lws[s] = log_joint - diag_logpdf(mu, lv, z)
            m = lws.max(axis=0)
            per_sample = m + np.log(np.mean(np.exp(lws - m), axis=0))
            total += float(per_sample.sum())
        out[mask.label()] = total / n
    return out


class EvalReport:
    """All metric values for one model snapshot."""

    __slots__ = ("probe", "cond_coherence", "joint_coherence", "iwae", "meta")

    def __init__(self, probe, cond_coherence, joint_coherence, iwae, meta):
        self.probe = probe
        self.cond_coherence = cond_coherence
        self.joint_coherence = joint_coherence
        self.iwae = iwae
        self.meta = meta

    def rows(self) -> list[tuple[str, str, float]]:
        """(metric, subset, value) triples in a stable order."""
        out = []
        for label in sorted(self.probe):
            out.append(("probe_accuracy", label, self.probe[label]))
        for key in sorted(self.cond_coherence):
            target, label = key
            out.append((f"coherence_to_m{target}", label, self.cond_coherence[key]))
        out.append(("joint_coherence", "prior", self.joint_coherence))
        for label in sorted(self.iwae):
            out.append(("iwae_loglik", label, self.iwae[label]))
        return out


def evaluate_model(
    model,
    train_ds: SyntheticDataset,
    test_ds: SyntheticDataset,
    judges: list[CoherenceJudge],
    rng: np.random.Generator,
    S: int = IWAE_SAMPLES_DEFAULT,
    n_joint: int = 1000,
    probe_n: int = PROBE_TRAIN_SAMPLES,
) -> EvalReport:
    """The full protocol: probes, conditional + joint coherence, IWAE."""
    _require_strong(judges)
    M = model.config.M
    subsets = enumerate_subsets(M, "all_nonempty")
    probe = linear_probe(model, train_ds, test_ds, rng, n_train=probe_n)
    # each target modality is generated from every nonempty subset of the
    # remaining modalities (a single modality conditions on itself)
    cond = {}
    for target in range(M):
        others = [j for j in range(M) if j != target] or [target]
        for k in range(1, 2 ** len(others)):
            conditioning = [others[i] for i in range(len(others)) if (k >> i) & 1]
            mask = SubsetMask(tuple(j in conditioning for j in range(M)))
            cond[(target, mask.label())] = coherence(
                model, judges, test_ds, "conditional", rng, subset=conditioning, target=target
            )
    joint = coherence(model, judges, test_ds, "joint", rng, n_samples=n_joint)
    iwae = iwae_log_likelihood(model, test_ds, rng, subsets=subsets, S=S)
    meta = {"test_size": len(test_ds), "iwae_samples": S, "joint_samples": n_joint}
    return EvalReport(probe, cond, joint, iwae, meta)
