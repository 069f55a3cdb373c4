"""MoCo and SimCLR contrastive losses plus the MoCo momentum/queue updates."""
import torch


class ZeroNormError(ValueError):
    """Cosine similarity is undefined for a zero-norm vector."""


class ArchitectureMismatchError(ValueError):
    pass


def _unit(x, eps=1e-12):
    norms = x.norm(dim=-1, keepdim=True)
    if x.numel() and bool((norms <= eps).any()):
        raise ZeroNormError("cannot take cosine similarity of a zero-norm vector")
    return x / norms


def moco_loss(query, key, queue, tau, reduction="mean"):
    """InfoNCE loss of a query against its positive key and the queue negatives.

    ``query`` and ``key`` are (d,) or (B, d); ``queue`` is (L, d), possibly
    with L == 0. Similarities are cosine. For a batch the per-query losses are
    averaged (``reduction="mean"``) or summed.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    single = query.dim() == 1
    q = _unit(query.reshape(-1, query.shape[-1]))
    k = _unit(key.reshape(-1, key.shape[-1]))
    pos = (q * k).sum(dim=1, keepdim=True)
    if queue is not None and len(queue):
        neg = q @ _unit(queue).T
        logits = torch.cat([pos, neg], dim=1) / tau
    else:
        logits = pos / tau
    losses = torch.logsumexp(logits, dim=1) - logits[:, 0]
    if single:
        return losses[0]
    return losses.sum() if reduction == "sum" else losses.mean()


def simclr_loss(features, tau, projection=None):
    """NT-Xent loss over 2N features where rows (2t, 2t+1) are positive pairs.

    Every row is an anchor once, so both orders of each pair contribute; the
    2N terms are averaged. ``projection`` (the head g) is applied first when
    given.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n2 = features.shape[0]
    if n2 < 2 or n2 % 2:
        raise ValueError(f"need an even number (>= 2) of features, got {n2}")
    z = projection(features) if projection is not None else features
    z = _unit(z)
    sim = z @ z.T / tau
    self_mask = torch.eye(n2, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    partner = torch.arange(n2, device=z.device) ^ 1
    pos = sim[torch.arange(n2, device=z.device), partner]
    return (torch.logsumexp(sim, dim=1) - pos).mean()


@torch.no_grad()
def momentum_update(encoder, momentum_encoder, m):
    """theta_m <- m * theta_m + (1 - m) * theta for every parameter."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    src = dict(encoder.named_parameters())
    dst = dict(momentum_encoder.named_parameters())
    if src.keys() != dst.keys() or any(src[k].shape != dst[k].shape for k in src):
        raise ArchitectureMismatchError("encoder and momentum encoder differ in architecture")
    for name, p_m in dst.items():
        p_m.mul_(m).add_(src[name].detach(), alpha=1.0 - m)
    return momentum_encoder


def queue_update(queue, new_keys, capacity):
    """FIFO enqueue of ``new_keys`` keeping at most ``capacity`` newest keys."""
    if new_keys.dim() != 2 or (len(queue) and queue.shape[1] != new_keys.shape[1]):
        raise ValueError(
            f"key dimension mismatch: queue {tuple(queue.shape)}, keys {tuple(new_keys.shape)}")
    if len(new_keys) > capacity:
        raise ValueError(f"cannot enqueue {len(new_keys)} keys into a queue of capacity {capacity}")
    if not len(queue):
        queue = new_keys.new_zeros((0, new_keys.shape[1]))
    return torch.cat([queue, new_keys.detach()], dim=0)[-capacity:]

