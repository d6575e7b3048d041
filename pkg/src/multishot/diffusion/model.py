"""Token-transformer noise predictor with hand-written reverse-mode gradients.

Two pre-LN blocks of single-head self-attention + GELU MLP over the
[text | shot | temporal | chunk] sequence; the output head reads only the
chunk tokens. All math is float64 so analytic gradients can be verified
against central finite differences tightly.
"""

from __future__ import annotations

import numpy as np

from ..config import ModelConfig
from .tokens import TokenSequence, tokens_to_chunk

_LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


class NonFiniteActivation(FloatingPointError):
    def __init__(self, where: str):
        super().__init__(f"non-finite activation at {where}")
        self.where = where


class NonFiniteGradient(FloatingPointError):
    pass


def _sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = positions[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


_GELU_A = 0.044715


def _gelu(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tanh-approximation GELU; returns (value, tanh) so the backward pass
    can reuse the transcendental."""
    u2 = u * u
    th = np.tanh(_GELU_C * (u + _GELU_A * u2 * u))
    return 0.5 * u * (1.0 + th), th


def _gelu_grad(u: np.ndarray, th: np.ndarray) -> np.ndarray:
    u2 = u * u
    return 0.5 * (1.0 + th) + (0.5 * _GELU_C) * u * (1.0 - th * th) * (1.0 + 3.0 * _GELU_A * u2)


class DenoiserModel:
    """Parameters live in a flat name->array dict in declaration order."""

    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        d, pd = self.cfg.d_model, self.cfg.patch_dim
        rng = np.random.default_rng(self.cfg.init_seed)

        def w(*shape, std=0.02):
            return rng.normal(0.0, std, size=shape)

        p: dict[str, np.ndarray] = {}
        p["w_in"] = w(pd, d)
        p["b_in"] = np.zeros(d)
        p["seg"] = w(4, d)
        resid_std = 0.02 / np.sqrt(2.0 * self.cfg.n_blocks)
        for i in range(self.cfg.n_blocks):
            pre = f"blk{i}."
            p[pre + "ln1_g"] = np.ones(d)
            p[pre + "ln1_b"] = np.zeros(d)
            p[pre + "wq"] = w(d, d)
            p[pre + "bq"] = np.zeros(d)
            p[pre + "wk"] = w(d, d)
            p[pre + "bk"] = np.zeros(d)
            p[pre + "wv"] = w(d, d)
            p[pre + "bv"] = np.zeros(d)
            p[pre + "wo"] = w(d, d, std=resid_std)
            p[pre + "bo"] = np.zeros(d)
            p[pre + "ln2_g"] = np.ones(d)
            p[pre + "ln2_b"] = np.zeros(d)
            p[pre + "w1"] = w(d, self.cfg.d_mlp)
            p[pre + "b1"] = np.zeros(self.cfg.d_mlp)
            p[pre + "w2"] = w(self.cfg.d_mlp, d, std=resid_std)
            p[pre + "b2"] = np.zeros(d)
        p["ln_f_g"] = np.ones(d)
        p["ln_f_b"] = np.zeros(d)
        p["w_out"] = np.zeros((d, pd))
        p["b_out"] = np.zeros(pd)
        self.params = p

        # fixed embeddings: first half encodes latent index, second half patch
        # index; the timestep embedding is added to every token
        max_pos = 64
        self._pos_latent = _sinusoid(np.arange(max_pos, dtype=np.float64), d // 2)
        self._pos_patch = _sinusoid(np.arange(max_pos, dtype=np.float64), d - d // 2)
        self._t_table = _sinusoid(np.arange(self.cfg.timesteps, dtype=np.float64), d)

    def param_names(self) -> list[str]:
        return list(self.params.keys())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _embed_inputs(self, seq: TokenSequence) -> np.ndarray:
        p = self.params
        x = seq.features @ p["w_in"] + p["b_in"]
        x = x + p["seg"][seq.segments]
        pos = np.concatenate([self._pos_latent[seq.latent_pos],
                              self._pos_patch[seq.patch_pos]], axis=1)
        return x + pos + self._t_table[seq.t][None, :]

    @staticmethod
    def _ln_forward(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        sigma = np.sqrt(var + _LN_EPS)
        xhat = (x - mu) / sigma
        return xhat * g + b, (xhat, sigma)

    @staticmethod
    def _ln_backward(dy, cache, g):
        xhat, sigma = cache
        ghat = dy * g
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        dx = (ghat - m1 - xhat * m2) / sigma
        dg = (dy * xhat).sum(axis=0)
        db = dy.sum(axis=0)
        return dx, dg, db

    def forward(self, seq: TokenSequence, want_tape: bool = False):
        """Predicted noise over the chunk tokens, chunk-shaped."""
        p = self.params
        d = self.cfg.d_model
        scale = 1.0 / np.sqrt(d)
        x = self._embed_inputs(seq)
        tape = {"x0": x, "blocks": []} if want_tape else None
        for i in range(self.cfg.n_blocks):
            pre = f"blk{i}."
            h, ln1c = self._ln_forward(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = h @ p[pre + "wq"] + p[pre + "bq"]
            k = h @ p[pre + "wk"] + p[pre + "bk"]
            v = h @ p[pre + "wv"] + p[pre + "bv"]
            scores = (q @ k.T) * scale
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            o = attn @ v
            a = o @ p[pre + "wo"] + p[pre + "bo"]
            x1 = x + a
            h2, ln2c = self._ln_forward(x1, p[pre + "ln2_g"], p[pre + "ln2_b"])
            u = h2 @ p[pre + "w1"] + p[pre + "b1"]
            z, th = _gelu(u)
            m = z @ p[pre + "w2"] + p[pre + "b2"]
            x2 = x1 + m
            if want_tape:
                tape["blocks"].append((h, ln1c, q, k, v, attn, o, x1, h2, ln2c, u, z, th))
            x = x2
        xf, lnfc = self._ln_forward(x, p["ln_f_g"], p["ln_f_b"])
        chunk_tokens = xf[seq.chunk_slice]
        out = chunk_tokens @ p["w_out"] + p["b_out"]
        pred = tokens_to_chunk(out, seq.n_chunk_latents, self.cfg.frame_size, self.cfg.patch)
        if want_tape:
            tape.update({"x_final": x, "lnfc": lnfc, "xf": xf, "seq": seq})
            return pred, tape
        return pred

    def backward(self, tape: dict, dpred: np.ndarray,
                 grads: dict[str, np.ndarray]) -> None:
        """Accumulate parameter gradients for one sequence into `grads`."""
        p = self.params
        seq: TokenSequence = tape["seq"]
        d = self.cfg.d_model
        scale = 1.0 / np.sqrt(d)

        # invert tokens_to_chunk: rebuild (n_chunk_tokens, patch_dim) layout
        from .tokens import chunk_to_tokens
        dout = chunk_to_tokens(dpred, self.cfg.patch)

        xf = tape["xf"]
        chunk_tokens = xf[seq.chunk_slice]
        grads["w_out"] += chunk_tokens.T @ dout
        grads["b_out"] += dout.sum(axis=0)
        dxf = np.zeros_like(xf)
        dxf[seq.chunk_slice] = dout @ p["w_out"].T

        dx, dg, db = self._ln_backward(dxf, tape["lnfc"], p["ln_f_g"])
        grads["ln_f_g"] += dg
        grads["ln_f_b"] += db

        for i in range(self.cfg.n_blocks - 1, -1, -1):
            pre = f"blk{i}."
            h, ln1c, q, k, v, attn, o, x1, h2, ln2c, u, z, th = tape["blocks"][i]

            # x2 = x1 + m, m = gelu(u) @ w2 + b2, u = h2 @ w1 + b1
            dm = dx
            grads[pre + "w2"] += z.T @ dm
            grads[pre + "b2"] += dm.sum(axis=0)
            dz = dm @ p[pre + "w2"].T
            du = dz * _gelu_grad(u, th)
            grads[pre + "w1"] += h2.T @ du
            grads[pre + "b1"] += du.sum(axis=0)
            dh2 = du @ p[pre + "w1"].T
            dx1, dg, db = self._ln_backward(dh2, ln2c, p[pre + "ln2_g"])
            grads[pre + "ln2_g"] += dg
            grads[pre + "ln2_b"] += db
            dx1 = dx1 + dx  # residual

            # x1 = x + a, a = (attn @ v) @ wo + bo
            da = dx1
            grads[pre + "wo"] += o.T @ da
            grads[pre + "bo"] += da.sum(axis=0)
            do = da @ p[pre + "wo"].T
            dattn = do @ v.T
            dv = attn.T @ do
            rowdot = (dattn * attn).sum(axis=-1, keepdims=True)
            dscores = (dattn - rowdot) * attn
            dq = (dscores @ k) * scale
            dk = (dscores.T @ q) * scale
            grads[pre + "wq"] += h.T @ dq
            grads[pre + "bq"] += dq.sum(axis=0)
            grads[pre + "wk"] += h.T @ dk
            grads[pre + "bk"] += dk.sum(axis=0)
            grads[pre + "wv"] += h.T @ dv
            grads[pre + "bv"] += dv.sum(axis=0)
            dh = dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T
            dxa, dg, db = self._ln_backward(dh, ln1c, p[pre + "ln1_g"])
            grads[pre + "ln1_g"] += dg
            grads[pre + "ln1_b"] += db
            dx = dx1 + dxa  # residual

        # input embedding: x0 = feats @ w_in + b_in + seg[segments] + const
        grads["w_in"] += seq.features.T @ dx
        grads["b_in"] += dx.sum(axis=0)
        np.add.at(grads["seg"], seq.segments, dx)

    def clone_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for k in self.params:
            if k not in params:
                raise KeyError(f"missing parameter {k}")
            if params[k].shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}")
            self.params[k] = np.asarray(params[k], dtype=np.float64).copy()


def denoise(model: DenoiserModel, seq: TokenSequence) -> np.ndarray:
    """Inference entry point with non-finite detection."""
    pred = model.forward(seq)
    if not np.isfinite(pred).all():
        for name, val in model.params.items():
            if not np.isfinite(val).all():
                raise NonFiniteActivation(f"parameter {name}")
        raise NonFiniteActivation("output head")
    return pred


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
