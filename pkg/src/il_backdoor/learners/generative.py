"""Generative replay: a VAE stands in for the buffer.

From the second task on, every step mixes the current batch with an
equal-size batch sampled from the previous task boundary's frozen
generator.  The solver learns replayed images against the previous
solver's outputs (hard argmax labels for DGR, temperature-softened
targets for the distillation variant), and the live generator itself
trains on the same current+replayed mixture so it keeps covering old
tasks.
"""

from __future__ import annotations

import numpy as np

from ..losses import CrossEntropyTerm, DistillationTerm, LossSpec
from ..optim import Adam
from ..vae import VAE
from .base import BaseLearner


class DGR(BaseLearner):
    method = "DGR"
    soft_replay = False

    def __init__(self, config, meta, seed):
        super().__init__(config, meta, seed)
        self.generator = VAE(
            meta.n_inputs,
            list(config.vae_hidden),
            latent_dim=config.vae_latent,
            rng=self.rng,
            dtype=self.model.dtype,
        )
        self.gen_opt = Adam(self.generator.n_params, lr=config.lr, dtype=self.model.dtype)
        self._gen_grad = np.zeros(self.generator.n_params, dtype=self.model.dtype)
        self._gen_grad_replay = np.zeros(self.generator.n_params, dtype=self.model.dtype)
        self.prev_model = None
        self.prev_generator = None

    def _noise(self, n):
        return self.rng.standard_normal((n, self.generator.latent_dim)).astype(self.model.dtype)

    def _train_generator(self, x_cur, x_gen, rnt):
        loss_cur, g_cur = self.generator.elbo_loss_and_grad(
            x_cur, self._noise(len(x_cur)), grad_out=self._gen_grad
        )
        if x_gen is None:
            self.gen_opt.step(self.generator.params, g_cur)
            return loss_cur
        loss_rep, g_rep = self.generator.elbo_loss_and_grad(
            x_gen, self._noise(len(x_gen)), grad_out=self._gen_grad_replay
        )
        g_cur *= rnt
        g_rep *= 1.0 - rnt
        g_cur += g_rep
        self.gen_opt.step(self.generator.params, g_cur)
        return rnt * loss_cur + (1.0 - rnt) * loss_rep

    def _replay_terms(self, x_gen, t, rows, total_weight):
        """Loss terms tying replayed images to the previous solver's outputs."""
        if self.scenario == "task":
            teacher = self.prev_model.logits(x_gen, head="all")
            w = total_weight / (t - 1)
            terms = []
            for h in range(t - 1):
                cols = self.model.head_cols(h)
                tl = teacher[:, cols]
                if self.soft_replay:
                    terms.append(
                        DistillationTerm(tl, T=self.config.T, weight=w, rows=rows, cols=cols)
                    )
                else:
                    terms.append(
                        CrossEntropyTerm(tl.argmax(axis=1), weight=w, rows=rows, cols=cols)
                    )
            return terms
        if self.scenario == "class":
            old_hi = self.meta.class_offsets[t - 1]
            teacher = self.prev_model.logits(x_gen)[:, :old_hi]
            cols = slice(0, old_hi)
        else:
            teacher = self.prev_model.logits(x_gen)
            cols = None
        if self.soft_replay:
            return [
                DistillationTerm(teacher, T=self.config.T, weight=total_weight, rows=rows, cols=cols)
            ]
        return [
            CrossEntropyTerm(teacher.argmax(axis=1), weight=total_weight, rows=rows, cols=cols)
        ]

    def step(self, xb, yb, t):
        nb = len(xb)
        if self.prev_generator is None:
            solver_loss = self._apply(
                xb, LossSpec([self._ce_current(yb, t)]), head=self._base_head(t)
            )
            gen_loss = self._train_generator(xb, None, 1.0)
            return solver_loss + gen_loss

        rnt = 1.0 / t
        ng = max(1, int(round(self.config.replay_ratio * nb)))
        x_gen = self.prev_generator.sample(ng, self.rng)
        gen_rows = slice(nb, nb + ng)
        multi = self.scenario == "task"
        terms = [self._ce_current(yb, t, weight=rnt, rows=slice(0, nb), all_heads=multi)]
        terms += self._replay_terms(x_gen, t, gen_rows, 1.0 - rnt)
        x_all = np.concatenate([xb, x_gen], axis=0)
        solver_loss = self._apply(x_all, LossSpec(terms), head="all" if multi else None)
        gen_loss = self._train_generator(xb, x_gen, rnt)
        return solver_loss + gen_loss

    def _consolidate(self, task, task_index):
        self.prev_model = self.model.copy()
        self.prev_generator = self.generator.copy()

    def replay_samples(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """Images the generator would feed back as replay right now."""
        return self.generator.sample(n, rng if rng is not None else self.rng)

    def aux_arrays(self):
        out = {"generator.params": self.generator.params}
        if self.prev_model is not None:
            out["prev_model.params"] = self.prev_model.params
            out["prev_generator.params"] = self.prev_generator.params
        return out

    def aux_meta(self):
        return {
            "generator": {
                "n_inputs": self.generator.n_inputs,
                "hidden": self.generator.hidden,
                "latent_dim": self.generator.latent_dim,
            }
        }

    def restore_aux(self, aux, meta):
        self.generator.params[...] = aux["generator.params"].astype(self.model.dtype)
        if "prev_model.params" in aux:
            self.prev_model = self.model.copy()
            self.prev_model.params[...] = aux["prev_model.params"].astype(self.model.dtype)
            self.prev_generator = self.generator.copy()
            self.prev_generator.params[...] = aux["prev_generator.params"].astype(self.model.dtype)


class DGRdistill(DGR):
    method = "DGRdistill"
    soft_replay = True
