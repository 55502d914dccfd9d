"""Differentiable building blocks (neural substrate)."""
from .blocks import (adjacency_pairs, gat_backward, gat_forward, gat_init, gat_propagate, gru_backward,
                     gru_forward, gru_init, gru_step, mlp_apply, mlp_backward, mlp_forward, mlp_init)
from .gradcheck import grad_check
from .mixtures import (BernMixParams, GmmParams2D, bernmix_from_raw, bernmix_logprob, bernmix_nll_raw,
                       bernmix_sample, gmm_from_raw, gmm_nll, gmm_nll_raw, gmm_sample)
from .params import Adam, ParamStore, load_checkpoint, save_checkpoint

__all__ = [
    "Adam", "ParamStore", "load_checkpoint", "save_checkpoint", "grad_check",
    "mlp_init", "mlp_forward", "mlp_backward", "mlp_apply",
    "gru_init", "gru_forward", "gru_backward", "gru_step",
    "gat_init", "gat_forward", "gat_backward", "gat_propagate", "adjacency_pairs",
    "GmmParams2D", "BernMixParams", "gmm_nll", "gmm_sample", "gmm_nll_raw", "gmm_from_raw",
    "bernmix_logprob", "bernmix_sample", "bernmix_nll_raw", "bernmix_from_raw",
]
