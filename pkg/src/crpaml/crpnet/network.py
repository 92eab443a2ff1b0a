"""The CRP prediction network.

Two encoding modules feed an L2-regularized concatenation: module A
consumes the transaction, risk, and derived blocks; module B consumes the
sender and receiver context embeddings produced by a shared two-layer
Tanh context encoder. A two-layer LeakyReLU decoder and a sigmoid head
produce the laundering probability. All parameters train jointly under
one loss.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
import numpy as np

from ..neuralcore import (
    AdamState,
    BatchNormState,
    DenseLayerParams,
    FocalLossConfig,
    NumericsError,
    batchnorm_backward,
    batchnorm_forward,
    dense_backward,
    dense_forward,
    focal_loss,
    init_batchnorm,
    init_dense,
    leaky_relu_backward,
    leaky_relu_forward,
    relu_backward,
    relu_forward,
    sigmoid_forward,
    tanh_backward,
    tanh_forward,
)

CHECKPOINT_MAGIC = b"CRPNET\x00\x01"


@dataclass
class NetworkConfig:
    context_hidden: int = 64
    context_out: int = 32
    encoder_width: int = 128
    decoder_width: int = 64
    activity_l2: float = 1e-4
    focal_alpha: float = 0.25
    focal_gamma: float = 3.0
    learning_rate: float = 0.001
    batch_size: int = 1024
    max_epochs: int = 100
    patience: int = 10
    seed: int = 1
    decision_threshold: float = 0.5
    leaky_slope: float = 0.01
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.decision_threshold < 1.0:
            raise ValueError("decision threshold must lie in (0, 1)")

    def focal(self) -> FocalLossConfig:
        return FocalLossConfig(alpha=self.focal_alpha, gamma=self.focal_gamma)

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, raw: dict) -> "NetworkConfig":
        return cls(**raw)


# parameter blocks in declaration order; bn running stats ride along as state
_DENSE_BLOCKS = ("ctx1", "ctx2", "enc_a1", "enc_a2", "enc_b1", "enc_b2", "dec1", "dec2", "head")
_BN_BLOCKS = ("bn_a", "bn_b")


class CRPNetwork:
    def __init__(self, config: NetworkConfig, main_width: int, profile_width: int):
        self.config = config
        self.main_width = main_width
        self.profile_width = profile_width
        rng = np.random.default_rng(config.seed)
        w, ctx_h, ctx_o, dec = (
            config.encoder_width,
            config.context_hidden,
            config.context_out,
            config.decoder_width,
        )
        self.dense: dict[str, DenseLayerParams] = {
            "ctx1": init_dense(rng, profile_width, ctx_h),
            "ctx2": init_dense(rng, ctx_h, ctx_o),
            "enc_a1": init_dense(rng, main_width, w),
            "enc_a2": init_dense(rng, w, w),
            "enc_b1": init_dense(rng, 2 * ctx_o, w),
            "enc_b2": init_dense(rng, w, w),
            "dec1": init_dense(rng, 2 * w, dec),
            "dec2": init_dense(rng, dec, dec),
            "head": init_dense(rng, dec, 1),
        }
        self.bn: dict[str, BatchNormState] = {
            "bn_a": init_batchnorm(w, config.bn_momentum, config.bn_epsilon),
            "bn_b": init_batchnorm(w, config.bn_momentum, config.bn_epsilon),
        }

    # --- parameter plumbing -------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to every trainable array, in declaration order."""
        out: dict[str, np.ndarray] = {}
        for name in _DENSE_BLOCKS:
            out[f"{name}.weight"] = self.dense[name].weight
            out[f"{name}.bias"] = self.dense[name].bias
        for name in _BN_BLOCKS:
            out[f"{name}.gamma"] = self.bn[name].gamma
            out[f"{name}.beta"] = self.bn[name].beta
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Trainable parameters plus batch-norm running statistics."""
        out = self.parameters()
        for name in _BN_BLOCKS:
            out[f"{name}.running_mean"] = self.bn[name].running_mean
            out[f"{name}.running_var"] = self.bn[name].running_var
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: values.copy() for name, values in self.state_arrays().items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, values in snapshot.items():
            if name.endswith(("running_mean", "running_var")):
                block, _, attr = name.rpartition(".")
                setattr(self.bn[block], attr, values.copy())
            else:
                target = self.state_arrays()[name]
                target[...] = values

    # --- forward pieces ----------------------------------------------------

    def encode_context(self, profile_rows: np.ndarray) -> np.ndarray:
        """Two dense layers, Tanh output: every coordinate lands in [-1, 1]."""
        h1 = tanh_forward(dense_forward(profile_rows, self.dense["ctx1"]))
        return tanh_forward(dense_forward(h1, self.dense["ctx2"]))

    def _encode_context_cached(self, rows: np.ndarray):
        h1 = tanh_forward(dense_forward(rows, self.dense["ctx1"]))
        emb = tanh_forward(dense_forward(h1, self.dense["ctx2"]))
        return emb, (rows, h1, emb)

    def _encoder_backward(self, cache, d_emb, grads: dict[str, np.ndarray]) -> None:
        rows, h1, emb = cache
        dz2 = tanh_backward(emb, d_emb)
        dh1, dw2, db2 = dense_backward(h1, self.dense["ctx2"], dz2)
        grads["ctx2.weight"] += dw2
        grads["ctx2.bias"] += db2
        dz1 = tanh_backward(h1, dh1)
        _, dw1, db1 = dense_backward(rows, self.dense["ctx1"], dz1)
        grads["ctx1.weight"] += dw1
        grads["ctx1.bias"] += db1

    def _module_forward(self, x: np.ndarray, prefix: str, bn_name: str, mode: str):
        z1 = dense_forward(x, self.dense[f"{prefix}1"])
        h1 = tanh_forward(z1)
        z2 = dense_forward(h1, self.dense[f"{prefix}2"])
        h2 = relu_forward(z2)
        out, bn_cache = batchnorm_forward(h2, self.bn[bn_name], mode)
        return out, (x, h1, z2, h2, bn_cache)

    def _module_backward(self, d_out, cache, prefix: str, bn_name: str, grads) -> np.ndarray:
        x, h1, z2, h2, bn_cache = cache
        dh2, dgamma, dbeta = batchnorm_backward(d_out, self.bn[bn_name], bn_cache)
        grads[f"{bn_name}.gamma"] += dgamma
        grads[f"{bn_name}.beta"] += dbeta
        dz2 = relu_backward(z2, dh2)
        dh1, dw2, db2 = dense_backward(h1, self.dense[f"{prefix}2"], dz2)
        grads[f"{prefix}2.weight"] += dw2
        grads[f"{prefix}2.bias"] += db2
        dz1 = tanh_backward(h1, dh1)
        dx, dw1, db1 = dense_backward(x, self.dense[f"{prefix}1"], dz1)
        grads[f"{prefix}1.weight"] += dw1
        grads[f"{prefix}1.bias"] += db1
        return dx

    def forward_assembled(self, x: np.ndarray, mode: str = "infer") -> np.ndarray:
        """p_hat from an already-assembled input (context slots encoded)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        main = x[:, : self.main_width]
        ctx = x[:, self.main_width :]
        p, _ = self._head_forward(main, ctx, mode)
        return p

    def _head_forward(self, main: np.ndarray, ctx_cat: np.ndarray, mode: str):
        out_a, cache_a = self._module_forward(main, "enc_a", "bn_a", mode)
        out_b, cache_b = self._module_forward(ctx_cat, "enc_b", "bn_b", mode)
        h_cat = np.concatenate([out_a, out_b], axis=1)
        z1 = dense_forward(h_cat, self.dense["dec1"])
        d1 = leaky_relu_forward(z1, self.config.leaky_slope)
        z2 = dense_forward(d1, self.dense["dec2"])
        d2 = leaky_relu_forward(z2, self.config.leaky_slope)
        zh = dense_forward(d2, self.dense["head"])
        p = sigmoid_forward(zh)[:, 0]
        for name, arr in (("encoder_a", out_a), ("encoder_b", out_b), ("decoder", d2), ("head", p)):
            if not np.all(np.isfinite(arr)):
                raise NumericsError(f"non-finite values in layer {name}")
        cache = (cache_a, cache_b, h_cat, z1, d1, z2, d2, p)
        return p, cache

    # --- full training-step loss -----------------------------------------

    def loss_and_grads(
        self,
        main: np.ndarray,
        sender_rows: np.ndarray,
        receiver_rows: np.ndarray,
        y: np.ndarray,
        context_mask: float = 1.0,
    ) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
        """Mean focal loss plus mean per-sample activity L2 on the
        concatenated encodings; returns (loss, grads, p_hat)."""
        n = main.shape[0]
        cfg = self.config
        emb_s, cache_s = self._encode_context_cached(sender_rows)
        emb_r, cache_r = self._encode_context_cached(receiver_rows)
        ctx_cat = np.concatenate([emb_s, emb_r], axis=1) * context_mask

        p, cache = self._head_forward(main, ctx_cat, "train")
        cache_a, cache_b, h_cat, z1, d1, z2, d2, _ = cache

        losses, dldp = focal_loss(y, p, cfg.focal())
        penalty = cfg.activity_l2 * float(np.sum(h_cat * h_cat)) / n
        loss = float(losses.mean()) + penalty

        grads = {name: np.zeros_like(values) for name, values in self.parameters().items()}

        dp = dldp / n
        dzh = (dp * p * (1.0 - p))[:, None]
        dd2, dwh, dbh = dense_backward(d2, self.dense["head"], dzh)
        grads["head.weight"] += dwh
        grads["head.bias"] += dbh
        dz2 = leaky_relu_backward(z2, dd2, cfg.leaky_slope)
        dd1, dw2, db2 = dense_backward(d1, self.dense["dec2"], dz2)
        grads["dec2.weight"] += dw2
        grads["dec2.bias"] += db2
        dz1 = leaky_relu_backward(z1, dd1, cfg.leaky_slope)
        dh_cat, dw1, db1 = dense_backward(h_cat, self.dense["dec1"], dz1)
        grads["dec1.weight"] += dw1
        grads["dec1.bias"] += db1
        dh_cat = dh_cat + 2.0 * cfg.activity_l2 * h_cat / n

        width = self.config.encoder_width
        self._module_backward(dh_cat[:, :width], cache_a, "enc_a", "bn_a", grads)
        d_ctx = self._module_backward(dh_cat[:, width:], cache_b, "enc_b", "bn_b", grads)
        d_ctx = d_ctx * context_mask
        ctx_o = self.config.context_out
        self._encoder_backward(cache_s, d_ctx[:, :ctx_o], grads)
        self._encoder_backward(cache_r, d_ctx[:, ctx_o:], grads)
        return loss, grads, p

    def predict(
        self,
        main: np.ndarray,
        sender_rows: np.ndarray,
        receiver_rows: np.ndarray,
        context_mask: float = 1.0,
    ) -> np.ndarray:
        """Inference probabilities; deterministic affine batch-norm path."""
        ctx_cat = (
            np.concatenate(
                [self.encode_context(sender_rows), self.encode_context(receiver_rows)], axis=1
            )
            * context_mask
        )
        p, _ = self._head_forward(main, ctx_cat, "infer")
        return np.clip(p, 1e-12, 1.0 - 1e-12)

    def make_adam(self) -> AdamState:
        return AdamState(learning_rate=self.config.learning_rate)


# --- checkpoint format -------------------------------------------------------


def save_checkpoint(
    network: CRPNetwork, path: str | Path, schema_hash: str, extra: dict | None = None
) -> str:
    """Versioned binary checkpoint: 8-byte magic, schema hash, config JSON,
    then named float64 little-endian blocks in declaration order. Returns
    the checkpoint content hash."""
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    _write_bytes(payload, schema_hash.encode("ascii"))
    config_json = json.dumps(network.config.to_json(), sort_keys=True).encode("utf-8")
    _write_bytes(payload, config_json)
    meta = json.dumps(
        {"main_width": network.main_width, "profile_width": network.profile_width,
         **(extra or {})},
        sort_keys=True,
    ).encode("utf-8")
    _write_bytes(payload, meta)
    arrays = network.state_arrays()
    payload += struct.pack("<I", len(arrays))
    for name, values in arrays.items():
        _write_bytes(payload, name.encode("ascii"))
        dims = values.shape if values.ndim else (1,)
        payload += struct.pack("<B", len(dims))
        for dim in dims:
            payload += struct.pack("<I", dim)
        payload += np.ascontiguousarray(values, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(payload))
    return hashlib.sha256(bytes(payload)).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[CRPNetwork, str, dict]:
    """Returns (network, schema_hash, meta)."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic in {path}")
    offset = 8
    schema_hash, offset = _read_bytes(view, offset)
    config_json, offset = _read_bytes(view, offset)
    meta_json, offset = _read_bytes(view, offset)
    config = NetworkConfig.from_json(json.loads(config_json))
    meta = json.loads(meta_json)
    network = CRPNetwork(config, meta["main_width"], meta["profile_width"])
    (n_arrays,) = struct.unpack_from("<I", view, offset)
    offset += 4
    snapshot = {}
    for _ in range(n_arrays):
        name_bytes, offset = _read_bytes(view, offset)
        (ndim,) = struct.unpack_from("<B", view, offset)
        offset += 1
        dims = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", view, offset)
            offset += 4
            dims.append(dim)
        count = int(np.prod(dims))
        values = np.frombuffer(view, dtype="<f8", count=count, offset=offset).copy()
        offset += count * 8
        snapshot[name_bytes.decode("ascii")] = values.reshape(dims)
    network.restore(_match_shapes(snapshot, network))
    return network, schema_hash.decode("ascii"), meta


def _match_shapes(snapshot: dict[str, np.ndarray], network: CRPNetwork) -> dict[str, np.ndarray]:
    reference = network.state_arrays()
    out = {}
    for name, values in snapshot.items():
        if name not in reference:
            raise ValueError(f"unknown parameter block in checkpoint: {name}")
        out[name] = values.reshape(reference[name].shape) if reference[name].ndim else values
    return out


def checkpoint_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_bytes(payload: bytearray, data: bytes) -> None:
    payload += struct.pack("<I", len(data))
    payload += data


def _read_bytes(view: memoryview, offset: int) -> tuple[bytes, int]:
    (length,) = struct.unpack_from("<I", view, offset)
    offset += 4
    return bytes(view[offset : offset + length]), offset + length
