import torch


def central_difference(fn, x, step=1e-4):
    """Central finite-difference gradient of scalar ``fn`` at tensor ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a, b):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    denom = max(float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def smooth_image(rng, shape, sigma=1.5):
    from scipy.ndimage import gaussian_filter

    img = gaussian_filter(rng.random(shape), sigma)
    img = (img - img.min()) / (img.max() - img.min())
    return img


ACCEPTANCE_RESULTS = {}


def record_criterion(number, ok, detail):
    """Store one acceptance line; conftest prints them in the terminal summary."""
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
