"""Ladder-style VAE with several latent levels injected coarse-to-fine.

The encoder is a bottom-up MLP; the finest latent level reads the shallowest
hidden layer and the coarsest level reads the deepest one.  The decoder
starts from ``z_0`` alone and concatenates ``z_1, z_2, ...`` at successively
later blocks, ending in a sigmoid so every decoded pixel lies in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import archive
from . import ndgrad as nd
from .classifier import TrainLog
from .layers import StateError, as_batch, init_linear, linear, thaw, to_images
from .ndgrad import Tensor


@dataclass(frozen=True)
class MlvgmSpec:
    latent_dims: tuple[int, ...] = (8, 16, 32)
    encoder_widths: tuple[int, ...] = (256, 128, 64)
    decoder_widths: tuple[int, ...] = (64, 128, 256)
    image_dim: int = 256

    def __post_init__(self):
        n = len(self.latent_dims)
        if n < 2:
            raise ValueError("an MLVGM needs at least two latent levels")
        if len(self.encoder_widths) != n or len(self.decoder_widths) != n:
            raise ValueError("encoder/decoder widths must have one entry per latent level")
        if min(self.latent_dims + self.encoder_widths + self.decoder_widths + (self.image_dim,)) <= 0:
            raise ValueError("all dimensions must be positive")

    @property
    def levels(self) -> int:
        return len(self.latent_dims)

    def to_dict(self) -> dict:
        return {
            "latent_dims": list(self.latent_dims),
            "encoder_widths": list(self.encoder_widths),
            "decoder_widths": list(self.decoder_widths),
            "image_dim": self.image_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlvgmSpec":
        return cls(
            tuple(int(v) for v in d["latent_dims"]),
            tuple(int(v) for v in d["encoder_widths"]),
            tuple(int(v) for v in d["decoder_widths"]),
            int(d["image_dim"]),
        )


@dataclass(frozen=True, eq=False)
class LatentStack:
    """One code per latent level, coarse to fine.

    Codes are ``(dim_i,)`` vectors for a single image or ``(batch, dim_i)``
    arrays for a batch.
    """

    codes: tuple[np.ndarray, ...]
    provenance: str = "encoded"

    def __post_init__(self):
        for c in self.codes:
            if not np.isfinite(c).all():
                raise nd.NonFiniteError("latent code contains non-finite values")

    def __len__(self) -> int:
        return len(self.codes)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.codes[i]

    def replace(self, level: int, code: np.ndarray, provenance: str = "interpolated") -> "LatentStack":
        codes = list(self.codes)
        codes[level] = np.asarray(code, dtype=np.float32)
        return LatentStack(tuple(codes), provenance)


@dataclass(frozen=True, eq=False)
class EncoderPosterior:
    mu: tuple[np.ndarray, ...]
    logvar: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class MlvgmTrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    beta: float = 1.0
    warmup_frac: float = 0.2
    progressive: bool = True
    seed: int = 0


class Mlvgm:
    def __init__(self, spec: MlvgmSpec, params: dict[str, Tensor], trained: bool = False):
        self.spec = spec
        self.params = params
        self.trained = trained

    @classmethod
    def initialize(cls, spec: MlvgmSpec, rng: np.random.Generator) -> "Mlvgm":
        params: dict[str, Tensor] = {}
        n = spec.levels
        widths = (spec.image_dim,) + spec.encoder_widths
        for k in range(n):
            init_linear(params, f"enc{k}", widths[k], widths[k + 1], rng)
        for i, d in enumerate(spec.latent_dims):
            src = spec.encoder_widths[n - 1 - i]
            init_linear(params, f"post{i}.mu", src, d, rng)
            init_linear(params, f"post{i}.logvar", src, d, rng)
            params[f"post{i}.logvar.W"].data *= 0.1
        prev = 0
        for i, (d, w) in enumerate(zip(spec.latent_dims, spec.decoder_widths)):
            init_linear(params, f"dec{i}", prev + d, w, rng)
            prev = w
        init_linear(params, "out", prev, spec.image_dim, rng)
        return cls(spec, params)

    def _ensure_ready(self) -> None:
        if not self.trained:
            raise StateError("MLVGM has not been trained or loaded")

    # -- differentiable graph pieces ------------------------------------------

    def posterior_graph(self, x: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        n = self.spec.levels
        hidden = []
        h = x
        for k in range(n):
            h = nd.relu(linear(self.params, f"enc{k}", h))
            hidden.append(h)
        mus, logvars = [], []
        for i in range(n):
            src = hidden[n - 1 - i]
            mus.append(linear(self.params, f"post{i}.mu", src))
            logvars.append(linear(self.params, f"post{i}.logvar", src))
        return mus, logvars

    def encode_graph(self, x: Tensor) -> list[Tensor]:
        return self.posterior_graph(x)[0]

    def decode_graph(self, codes: Sequence[Tensor]) -> Tensor:
        if len(codes) != self.spec.levels:
            raise nd.ShapeError(f"expected {self.spec.levels} latent codes, got {len(codes)}")
        h = None
        for i, z in enumerate(codes):
            if z.data.ndim != 2 or z.shape[1] != self.spec.latent_dims[i]:
                raise nd.ShapeError(f"level {i}: code shape {z.shape}, expected (*, {self.spec.latent_dims[i]})")
            inp = z if h is None else nd.concat([h, z], axis=1)
            h = nd.relu(linear(self.params, f"dec{i}", inp))
        return nd.sigmoid(linear(self.params, "out", h))

    # -- numpy API ----------------------------------------------------------

    def posterior(self, x) -> EncoderPosterior:
        self._ensure_ready()
        flat, single = as_batch(x, self.spec.image_dim)
        with nd.no_tape():
            mus, logvars = self.posterior_graph(Tensor._wrap(flat))
        pick = (lambda t: t.data[0]) if single else (lambda t: t.data)
        return EncoderPosterior(tuple(pick(m) for m in mus), tuple(pick(v) for v in logvars))

    def encode(self, x) -> LatentStack:
        """Posterior means of every level (deterministic)."""
        return LatentStack(self.posterior(x).mu, "encoded")

    def sample_prior(self, rng: np.random.Generator, batch: int | None = None) -> LatentStack:
        shape = () if batch is None else (batch,)
        codes = tuple(rng.standard_normal(shape + (d,)).astype(np.float32) for d in self.spec.latent_dims)
        return LatentStack(codes, "sampled")

    def decode(self, z: LatentStack) -> np.ndarray:
        self._ensure_ready()
        if len(z) != self.spec.levels:
            raise nd.ShapeError(f"expected {self.spec.levels} latent codes, got {len(z)}")
        single = np.ndim(z.codes[0]) == 1
        codes = [Tensor._wrap(np.asarray(c, dtype=np.float32).reshape(-1, c.shape[-1])) for c in z.codes]
        with nd.no_tape():
            out = self.decode_graph(codes).data
        return to_images(out, single)

    def reconstruct(self, x) -> np.ndarray:
        return self.decode(self.encode(x))

    def elbo_graph(self, x: Tensor, beta: float, rng: np.random.Generator | None, active: int | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(loss, recon, kl)``; all are per-sample means over the batch.

        Levels at or beyond ``active`` are held at the prior mean (zero) and
        contribute no KL; this is how progressive training switches levels on.
        """
        batch = x.shape[0]
        active = self.spec.levels if active is None else active
        mus, logvars = self.posterior_graph(x)
        codes = []
        kl = None
        for i, (mu, lv) in enumerate(zip(mus, logvars)):
            if i >= active:
                codes.append(Tensor._wrap(np.zeros(mu.shape, np.float32)))
                continue
            if rng is None:
                codes.append(mu)
            else:
                eps = Tensor._wrap(rng.standard_normal(mu.shape).astype(np.float32))
                codes.append(nd.add(mu, nd.mul(nd.exp(nd.scale(lv, 0.5)), eps)))
            term = nd.gaussian_kl_standard(mu, lv)
            kl = term if kl is None else nd.add(kl, term)
        recon = nd.scale(nd.sum(nd.square(nd.sub(self.decode_graph(codes), x))), 1.0 / batch)
        kl = nd.scale(kl, 1.0 / batch)
        loss = nd.add(recon, nd.scale(kl, beta)) if beta else recon
        return loss, recon, kl

    def elbo_loss(self, x, beta: float, rng: np.random.Generator | None = None) -> float:
        flat, _ = as_batch(x, self.spec.image_dim)
        with nd.no_tape():
            loss, _, _ = self.elbo_graph(Tensor._wrap(flat), beta, rng)
        return float(loss.data)

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def dumps(self, meta: dict | None = None) -> bytes:
        return archive.pack_checkpoint("mlvgm", self.spec.to_dict(), self.state_dict(), meta)

    def save(self, path: str | Path, meta: dict | None = None) -> bytes:
        blob = self.dumps(meta)
        archive.write_bytes(path, blob)
        return blob

    @classmethod
    def loads(cls, blob: bytes) -> "Mlvgm":
        manifest, params = archive.unpack_checkpoint(blob)
        if manifest.get("kind") != "mlvgm":
            raise archive.FormatError(f"checkpoint holds a {manifest.get('kind')!r}, not an MLVGM")
        return cls(MlvgmSpec.from_dict(manifest["spec"]), thaw(params), trained=True)

    @classmethod
    def load(cls, path: str | Path) -> "Mlvgm":
        return cls.loads(Path(path).read_bytes())


def beta_schedule(epoch: int, epochs: int, beta: float, warmup_frac: float) -> float:
    warm = max(1, int(round(warmup_frac * epochs)))
    return beta * min(1.0, epoch / warm)


def active_levels(epoch: int, epochs: int, levels: int) -> int:
    """Progressive schedule: level ``i`` is switched on after ``i / (2 * levels)`` of training."""
    return min(levels, 1 + (2 * levels * epoch) // max(1, epochs))


def train(images, config: MlvgmTrainConfig = MlvgmTrainConfig(), spec: MlvgmSpec = MlvgmSpec(), val=None) -> tuple[Mlvgm, TrainLog]:
    """Adam on the negative ELBO with KL warm-up and optional progressive level activation."""
    rng = np.random.Generator(np.random.Philox(key=config.seed))
    flat = np.asarray(images, dtype=np.float32).reshape(-1, spec.image_dim)
    model = Mlvgm.initialize(spec, rng)
    params = [model.params[k] for k in sorted(model.params)]
    state = nd.AdamState()
    log = TrainLog()
    n = len(flat)
    for epoch in range(config.epochs):
        beta = beta_schedule(epoch, config.epochs, config.beta, config.warmup_frac)
        active = active_levels(epoch, config.epochs, spec.levels) if config.progressive else spec.levels
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            with nd.Tape() as tape:
                loss, recon, kl = model.elbo_graph(Tensor._wrap(flat[idx]), beta, rng, active)
            for p in params:
                p.zero_grad()
            tape.backward(loss)
            nd.adam_step(params, [p.grad for p in params], state, config.lr)
            sums += np.array([float(loss.data), float(recon.data), float(kl.data)]) * len(idx)
        model.trained = True
        row = {"epoch": epoch, "beta": beta, "active_levels": active, "loss": sums[0] / n, "recon": sums[1] / n, "kl": sums[2] / n}
        if val is not None:
            row["val_mse"] = float(np.mean((model.reconstruct(val) - np.asarray(val).reshape(-1, 16, 16)) ** 2))
        log.rows.append(row)
    return model, log
