"""Loss formulas on torch tensors (used by training and by the array-level wrappers)."""
import torch

# probability clamp applied before every logarithm
DELTA = 1e-7


def cosine_sync_probability(v, s, eps):
    """dot(v, s) / max(|v| |s|, eps) along the last axis."""
    denom = torch.clamp(torch.linalg.vector_norm(v, dim=-1) * torch.linalg.vector_norm(s, dim=-1), min=eps)
    return (v * s).sum(dim=-1) / denom


def binary_cross_entropy(p, label, delta=DELTA):
    p = torch.clamp(p, delta, 1.0 - delta)
    return -(label * torch.log(p) + (1.0 - label) * torch.log(1.0 - p))


def l1_reconstruction(generated, target):
    return (generated - target).abs().mean()


def expert_sync(p, delta=DELTA):
    return -torch.log(torch.clamp(p, delta, 1.0)).mean()


def adversarial_fake_term(d_fake, delta=DELTA):
    """mean log(1 - D(x)) over generated samples."""
    return torch.log(1.0 - torch.clamp(d_fake, delta, 1.0 - delta)).mean()


def nonsaturating_generator_term(d_fake, delta=DELTA):
    """-mean log D(x) over generated samples; the generator minimises this."""
    return -torch.log(torch.clamp(d_fake, delta, 1.0 - delta)).mean()


def disc_objective(d_real, d_fake, delta=DELTA):
    """mean log D(real) + mean log(1 - D(fake)); the discriminator maximises this."""
    return torch.log(torch.clamp(d_real, delta, 1.0 - delta)).mean() + adversarial_fake_term(d_fake, delta)


def weighted_total(l_recon, e_sync, l_gen, s_w, s_g):
    return (1.0 - s_w - s_g) * l_recon + s_w * e_sync + s_g * l_gen
