"""Variational autoencoder used as the replay generator.

Symmetric ReLU MLP encoder/decoder, standard-normal prior, per-pixel
binary cross-entropy reconstruction.  Parameters live in one flat
vector like the classifier, so the same Adam/checkpoint machinery
applies.  The ELBO gradient is hand-derived, including the
reparameterized sampling path; grad_check verifies it with the noise
draw frozen.
"""

from __future__ import annotations

import numpy as np

from .losses import sigmoid
from .nets import relu


def _layer_sizes(dims):
    total = 0
    for din, dout in zip(dims[:-1], dims[1:]):
        total += din * dout + dout
    return total


class VAE:
    def __init__(
        self,
        n_inputs: int,
        hidden: list[int],
        latent_dim: int = 100,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        self.n_inputs = n_inputs
        self.hidden = list(hidden)
        self.latent_dim = latent_dim
        self.dtype = np.dtype(dtype)
        self.enc_dims = [n_inputs, *hidden, 2 * latent_dim]
        self.dec_dims = [latent_dim, *reversed(hidden), n_inputs]

        self.n_params = _layer_sizes(self.enc_dims) + _layer_sizes(self.dec_dims)
        self.params = np.zeros(self.n_params, dtype=self.dtype)
        self._enc_views = self._make_views(self.params, self.enc_dims, 0)
        self._dec_views = self._make_views(
            self.params, self.dec_dims, _layer_sizes(self.enc_dims)
        )
        if rng is not None:
            self.init_params(rng)

    @staticmethod
    def _make_views(flat, dims, off):
        views = []
        for din, dout in zip(dims[:-1], dims[1:]):
            w = flat[off : off + din * dout].reshape(din, dout)
            off += din * dout
            b = flat[off : off + dout]
            off += dout
            views.append((w, b))
        return views

    def init_params(self, rng: np.random.Generator):
        for views, dims in ((self._enc_views, self.enc_dims), (self._dec_views, self.dec_dims)):
            for (w, b), din in zip(views, dims[:-1]):
                bound = 1.0 / np.sqrt(din)
                w[...] = rng.uniform(-bound, bound, size=w.shape).astype(self.dtype)
                b[...] = rng.uniform(-bound, bound, size=b.shape).astype(self.dtype)

    def copy(self) -> "VAE":
        clone = VAE(self.n_inputs, self.hidden, self.latent_dim, dtype=self.dtype)
        clone.params[...] = self.params
        return clone

    # -- sub-network passes ------------------------------------------------

    @staticmethod
    def _mlp_forward(views, x):
        a = x
        acts = [x]
        pre = []
        last = len(views) - 1
        for i, (w, b) in enumerate(views):
            z = a @ w
            z += b
            if i < last:
                a = relu(z)
                pre.append(z)
                acts.append(a)
            else:
                a = z
        return a, (acts, pre)

    @staticmethod
    def _mlp_backward(views, cache, dout, gviews):
        """Accumulate grads into gviews; returns gradient wrt the sub-net input."""
        acts, pre = cache
        da = dout
        last = len(views) - 1
        for i in range(last, -1, -1):
            if i < last:
                dz = da * (pre[i] > 0)
            else:
                dz = da
            gw, gb = gviews[i]
            gw += acts[i].T @ dz
            gb += dz.sum(axis=0)
            w, _ = views[i]
            da = dz @ w.T
        return da

    def encode(self, x: np.ndarray):
        out, cache = self._mlp_forward(self._enc_views, np.asarray(x, dtype=self.dtype))
        mu = out[:, : self.latent_dim]
        logvar = out[:, self.latent_dim :]
        return mu, logvar, cache

    def decode_logits(self, z: np.ndarray):
        return self._mlp_forward(self._dec_views, np.asarray(z, dtype=self.dtype))

    # -- ELBO --------------------------------------------------------------

    def elbo_loss(self, x: np.ndarray, eps: np.ndarray) -> float:
        """Negative ELBO (reconstruction BCE + KL), mean over the batch."""
        x = np.asarray(x, dtype=self.dtype)
        mu, logvar, _ = self.encode(x)
        z = mu + np.exp(0.5 * logvar) * eps.astype(self.dtype)
        logits, _ = self.decode_logits(z)
        n = len(x)
        l64 = logits.astype(np.float64)
        recon = float((np.logaddexp(0.0, l64) - l64 * x).sum()) / n
        lv = logvar.astype(np.float64)
        kl = -0.5 * float((1.0 + lv - mu.astype(np.float64) ** 2 - np.exp(lv)).sum()) / n
        return recon + kl

    def elbo_loss_and_grad(self, x: np.ndarray, eps: np.ndarray,
                           grad_out: np.ndarray | None = None):
        x = np.asarray(x, dtype=self.dtype)
        n = len(x)
        mu, logvar, enc_cache = self.encode(x)
        sd = np.exp(0.5 * logvar)
        eps = eps.astype(self.dtype)
        z = mu + sd * eps
        logits, dec_cache = self.decode_logits(z)

        l64 = logits.astype(np.float64)
        recon = float((np.logaddexp(0.0, l64) - l64 * x).sum()) / n
        lv = logvar.astype(np.float64)
        kl = -0.5 * float((1.0 + lv - mu.astype(np.float64) ** 2 - np.exp(lv)).sum()) / n

        if grad_out is None:
            grad_out = np.zeros(self.n_params, dtype=self.dtype)
        else:
            grad_out.fill(0.0)
        genc = self._make_views(grad_out, self.enc_dims, 0)
        gdec = self._make_views(grad_out, self.dec_dims, _layer_sizes(self.enc_dims))

        dlogits = ((sigmoid(l64) - x) / n).astype(self.dtype)
        dz = self._mlp_backward(self._dec_views, dec_cache, dlogits, gdec)

        # reparameterization: z = mu + exp(logvar/2)*eps, plus the KL terms
        dmu = dz + (mu / n)
        dlogvar = dz * eps * (0.5 * sd) + 0.5 * (np.exp(logvar) - 1.0) / n
        dout = np.concatenate([dmu, dlogvar], axis=1)
        self._mlp_backward(self._enc_views, enc_cache, dout.astype(self.dtype), genc)
        return recon + kl, grad_out

    # -- sampling ------------------------------------------------------------

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n decoded images squashed into [0, 1]; deterministic given rng state."""
        if n < 1:
            raise ValueError("n must be >= 1")
        z = rng.standard_normal((n, self.latent_dim)).astype(self.dtype)
        logits, _ = self.decode_logits(z)
        return sigmoid(logits.astype(np.float64)).astype(self.dtype)
