import math
import os
import torch


def as_float64(x, name='input'):
    """Converts anything array-like into a float64 tensor, checking that it is finite."""
    x = torch.as_tensor(x, dtype=torch.float64)
    if not torch.isfinite(x).all():
        raise ValueError("{} must be finite.".format(name))
    return x


def validate_points(x, channels, name='points', allow_empty=True):
    """Checks that `x` is a tensor of shape (..., channels), returning it as float64.

    Arguments:
        x: Anything convertible to a tensor.
        channels: The required size of the last dimension; 2 for pixels, 3 for world points.
        name: Used in error messages.
        allow_empty: Whether zero points are acceptable.

    Returns:
        A float64 tensor of shape (..., channels).
    """
    x = torch.as_tensor(x, dtype=torch.float64)
    if x.ndimension() < 1 or x.size(-1) != channels:
        raise ValueError("{} must have shape (..., {}). It instead has shape {}."
                         .format(name, channels, tuple(x.shape)))
    if not allow_empty and x.numel() == 0:
        raise ValueError("{} must not be empty.".format(name))
    if not torch.isfinite(x).all():
        raise ValueError("{} must be finite.".format(name))
    return x


def validate_image(image, name='image'):
    """Checks that `image` is a single-channel 8-bit raster of shape (height, width)."""
    image = torch.as_tensor(image)
    if image.ndimension() != 2:
        raise ValueError("{} must be two dimensional (height, width). It instead has shape {}."
                         .format(name, tuple(image.shape)))
    if image.dtype != torch.uint8:
        raise ValueError("{} must have dtype torch.uint8. It instead has dtype {}.".format(name, image.dtype))
    return image


def round_half_up(x):
    # torch.round is round-half-to-even; output quantisation has to be reproducible across implementations.
    return torch.floor(x + 0.5)


def to_uint8(x):
    return round_half_up(x).clamp(0, 255).to(torch.uint8)


def pixel_centres(width, height, dtype=torch.float64):
    """Returns a (height, width, 2) tensor of (u, v) pixel centres. Pixel (i, j) covers [j, j+1) x [i, i+1)."""
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype) + 0.5, torch.arange(width, dtype=dtype) + 0.5,
                          indexing='ij')
    return torch.stack([u, v], dim=-1)


def skew_symmetric(w):
    """Returns the (..., 3, 3) cross-product matrices of the (..., 3) vectors w."""
    zero = torch.zeros_like(w[..., 0])
    return torch.stack([torch.stack([zero, -w[..., 2], w[..., 1]], dim=-1),
                        torch.stack([w[..., 2], zero, -w[..., 0]], dim=-1),
                        torch.stack([-w[..., 1], w[..., 0], zero], dim=-1)], dim=-2)


def worker_count():
    """Number of workers for parallel stages, from SLSCAN_THREADS if set, otherwise the number of logical cores."""
    value = os.environ.get('SLSCAN_THREADS')
    if value is None:
        return os.cpu_count() or 1
    try:
        count = int(value)
    except ValueError:
        raise ValueError("SLSCAN_THREADS must be a positive integer. It is instead {!r}.".format(value))
    if count < 1:
        raise ValueError("SLSCAN_THREADS must be a positive integer. It is instead {!r}.".format(value))
    return count


def chunks(total, size):
    """Yields (start, end) index pairs covering range(total) in pieces of at most `size`."""
    size = max(1, int(size))
    for start in range(0, total, size):
        yield start, min(start + size, total)


def degrees(radians):
    return radians * 180 / math.pi
