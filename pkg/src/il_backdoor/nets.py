"""Fully-connected classifier with optional multi-head output and unit gating.

Parameters live in one flat vector; per-layer weight/bias arrays are
views into it, so the optimizer and the regularization-based learners
(which need per-parameter importances over the whole model) can treat
the model as a single 1-D array.  Gradients follow the same layout.

All gradients are hand-derived and verified against central finite
differences (see gradcheck.py).
"""

from __future__ import annotations

import numpy as np


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


class ClassifierMLP:
    """ReLU MLP over flat images.

    ``layer_dims`` is (input, hidden..., output).  With ``n_heads`` set,
    the output layer is split into equal-width per-task blocks and
    ``forward`` needs a head index.  ``gate_masks`` (one 0/1 matrix of
    shape (n_hidden_layers, width) per task) multiply hidden activations
    after the nonlinearity.
    """

    def __init__(
        self,
        layer_dims: list[int],
        n_heads: int | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if len(layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        self.layer_dims = list(layer_dims)
        self.n_heads = n_heads
        self.dtype = np.dtype(dtype)
        if n_heads is not None:
            if layer_dims[-1] % n_heads != 0:
                raise ValueError(
                    f"output width {layer_dims[-1]} not divisible into {n_heads} heads"
                )
            self.head_width = layer_dims[-1] // n_heads
        else:
            self.head_width = layer_dims[-1]
        self.gate_masks: dict[int, np.ndarray] = {}

        sizes = []
        for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
            sizes.append(din * dout)
            sizes.append(dout)
        self.n_params = int(np.sum(sizes))
        self.params = np.zeros(self.n_params, dtype=self.dtype)
        self._views: list[tuple[np.ndarray, np.ndarray]] = []
        off = 0
        for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
            w = self.params[off : off + din * dout].reshape(din, dout)
            off += din * dout
            b = self.params[off : off + dout]
            off += dout
            self._views.append((w, b))
        if rng is not None:
            self.init_params(rng)

    # -- parameter access ------------------------------------------------

    @property
    def n_hidden_layers(self) -> int:
        return len(self.layer_dims) - 2

    @property
    def hidden_width(self) -> int:
        return self.layer_dims[-2]

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self._views[i]

    def grad_views(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views into a flat gradient buffer matching the parameter layout."""
        views = []
        off = 0
        for din, dout in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = flat[off : off + din * dout].reshape(din, dout)
            off += din * dout
            b = flat[off : off + dout]
            off += dout
            views.append((w, b))
        return views

    def init_params(self, rng: np.random.Generator):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        for (w, b), din in zip(self._views, self.layer_dims[:-1]):
            bound = 1.0 / np.sqrt(din)
            w[...] = rng.uniform(-bound, bound, size=w.shape).astype(self.dtype)
            b[...] = rng.uniform(-bound, bound, size=b.shape).astype(self.dtype)

    def copy(self) -> "ClassifierMLP":
        clone = ClassifierMLP(self.layer_dims, n_heads=self.n_heads, dtype=self.dtype)
        clone.params[...] = self.params
        clone.gate_masks = {t: m.copy() for t, m in self.gate_masks.items()}
        return clone

    def set_gate_mask(self, task_id: int, mask: np.ndarray):
        mask = np.asarray(mask, dtype=self.dtype)
        expect = (self.n_hidden_layers, self.hidden_width)
        if mask.shape != expect:
            raise ValueError(f"gate mask shape {mask.shape}, expected {expect}")
        self.gate_masks[task_id] = mask

    def _head_slice(self, head) -> slice:
        if head == "all":
            # full output layer regardless of head layout; callers then pick
            # head columns themselves (joint losses over several heads)
            return slice(0, self.layer_dims[-1])
        if self.n_heads is None:
            if head not in (None, 0):
                raise ValueError("single-head model takes no head index")
            return slice(0, self.layer_dims[-1])
        if head is None:
            raise ValueError("multi-head model needs a head index")
        if not 0 <= head < self.n_heads:
            raise ValueError(f"head {head} out of range [0, {self.n_heads})")
        return slice(head * self.head_width, (head + 1) * self.head_width)

    def head_cols(self, head: int) -> slice:
        """Column range of one task head inside the full-width output."""
        if self.n_heads is None:
            return slice(0, self.layer_dims[-1])
        return self._head_slice(head)

    def _mask_rows(self, mask) -> np.ndarray | None:
        if mask is None:
            return None
        if isinstance(mask, (int, np.integer)):
            mask = self.gate_masks[int(mask)]
        mask = np.asarray(mask, dtype=self.dtype)
        if mask.shape != (self.n_hidden_layers, self.hidden_width):
            raise ValueError("gate mask shape mismatch")
        return mask

    # -- forward / backward ----------------------------------------------

    def forward(self, x: np.ndarray, head: int | None = None, mask=None):
        """Logits for a batch; returns (logits, cache) for backward."""
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.layer_dims[0]:
            raise ValueError(
                f"batch shape {x.shape} incompatible with input width {self.layer_dims[0]}"
            )
        mask = self._mask_rows(mask)
        hs = self._head_slice(head)
        a = x
        acts = [x]
        pre = []
        for i in range(self.n_hidden_layers):
            w, b = self._views[i]
            z = a @ w
            z += b
            a = relu(z)
            if mask is not None:
                a *= mask[i]
            pre.append(z)
            acts.append(a)
        w_out, b_out = self._views[-1]
        logits = acts[-1] @ w_out[:, hs]
        logits += b_out[hs]
        cache = (acts, pre, mask, hs)
        return logits, cache

    def backward(self, cache, dlogits: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Gradient of a scalar loss wrt params, given d(loss)/d(logits).

        Writes into ``out`` (zeroed here) when given, else allocates.
        """
        acts, pre, mask, hs = cache
        if out is None:
            out = np.zeros(self.n_params, dtype=self.dtype)
        else:
            out.fill(0.0)
        gviews = self.grad_views(out)
        dlogits = np.asarray(dlogits, dtype=self.dtype)

        gw_out, gb_out = gviews[-1]
        w_out, _ = self._views[-1]
        gw_out[:, hs] = acts[-1].T @ dlogits
        gb_out[hs] = dlogits.sum(axis=0)
        da = dlogits @ w_out[:, hs].T

        for i in range(self.n_hidden_layers - 1, -1, -1):
            if mask is not None:
                da *= mask[i]
            dz = da
            dz *= pre[i] > 0
            gw, gb = gviews[i]
            np.matmul(acts[i].T, dz, out=gw)
            gb[...] = dz.sum(axis=0)
            if i > 0:
                w, _ = self._views[i]
                da = dz @ w.T
        return out

    # -- inference helpers -------------------------------------------------

    def logits(self, x: np.ndarray, head: int | None = None, mask=None) -> np.ndarray:
        out, _ = self.forward(x, head=head, mask=mask)
        return out

    def features(self, x: np.ndarray, mask=None) -> np.ndarray:
        """Post-nonlinearity activations of the last hidden layer."""
        x = np.ascontiguousarray(x, dtype=self.dtype)
        mask = self._mask_rows(mask)
        a = x
        for i in range(self.n_hidden_layers):
            w, b = self._views[i]
            a = relu(a @ w + b)
            if mask is not None:
                a = a * mask[i]
        return a
