import torch
from torch.func import functional_call

from audiosurprisal import gmm
from audiosurprisal.model import ModelConfig

TINY = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, K_components=2, D_in=3, max_len=32)


def functional_loss(net, x):
    """Mean IC of one sequence x (T, D) as a function of a flat parameter vector."""
    named = list(net.named_parameters())
    names = [n for n, _ in named]
    shapes = [p.shape for _, p in named]
    sizes = [p.numel() for _, p in named]
    xt = torch.as_tensor(x, dtype=torch.float64)[None]
    cfg = net.config

    def loss(flat):
        params = {n: p.view(s) for n, p, s in zip(names, torch.split(flat, sizes), shapes)}
        raw = functional_call(net, params, (xt,))
        return gmm.torch_ic(raw, xt, cfg.K_components, cfg.D_in, cfg.scale_floor).mean()

    return loss
