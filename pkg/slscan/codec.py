"""Structured light pattern generation and decoding.

Gray-code stacks are projected MSB first, each bit followed (as a block) by its inverse, then an all-white and an
all-black reference. Decoding classifies every bit of every pixel with the robust rules built on a direct/global
separation of the light arriving at that pixel, so that indirect light, shadows and low-contrast pixels are reported
as invalid rather than decoded to a wrong projector coordinate.

Three-step phase shifting is provided alongside; its fringe orders are taken from the gray codes.
"""
import dataclasses
import logging
import math
import torch

from . import errors
from . import misc


logger = logging.getLogger(__name__)


SHIFTS = (-2 * math.pi / 3, 0., 2 * math.pi / 3)

KINDS = ('gray-x', 'gray-y', 'gray-x-inverse', 'gray-y-inverse', 'phase-x', 'phase-y', 'reference-white',
         'reference-black')

BIT_UNCERTAIN = -1
BIT_ZERO = 0
BIT_ONE = 1

REASON_VALID = 0
REASON_UNCERTAIN_BIT = 1
REASON_LOW_MODULATION = 2
REASON_LOW_DIRECT = 3
REASON_OUT_OF_RANGE = 4
REASONS = {REASON_VALID: 'valid',
           REASON_UNCERTAIN_BIT: 'uncertain-bit',
           REASON_LOW_MODULATION: 'low-modulation',
           REASON_LOW_DIRECT: 'low-direct',
           REASON_OUT_OF_RANGE: 'out-of-range'}


def gray_bits(extent):
    """Number of gray-code bits needed to index `extent` columns (or rows): ceil(log2(extent))."""
    extent = int(extent)
    if extent < 2:
        raise ValueError("extent must be at least 2. It is instead {}.".format(extent))
    return (extent - 1).bit_length()


def _axis_extent(axis, projector_width, projector_height):
    if axis == 'x':
        return projector_width
    elif axis == 'y':
        return projector_height
    raise ValueError("axis must be 'x' or 'y'. It is instead {!r}.".format(axis))


###################
# Types
###################

@dataclasses.dataclass(frozen=True)
class PhasePatternParams:
    """Sinusoidal fringe parameters: I = bias + amplitude * cos(2 pi x / fringe_width + shift)."""
    bias: float = 127.
    amplitude: float = 127.
    fringe_width: float = 20.

    def __post_init__(self):
        if self.fringe_width <= 0:
            raise ValueError("fringe_width must be positive. It is instead {}.".format(self.fringe_width))
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative. It is instead {}.".format(self.amplitude))
        if self.bias - self.amplitude < 0 or self.bias + self.amplitude > 255:
            raise errors.ClippingError("Fringes with bias {} and amplitude {} leave the [0, 255] range."
                                       .format(self.bias, self.amplitude))

    @property
    def shifts(self):
        return SHIFTS


@dataclasses.dataclass(frozen=True, eq=False)
class PatternStack:
    """An ordered stack of 8-bit patterns, as generated for the projector or as captured by the camera.

    Attributes:
        images: uint8 tensor of shape (count, height, width). Projector resolution when generated, camera resolution
            when captured.
        kinds: One entry of `KINDS` per image.
        indices: Per image, the bit index (gray kinds, 0 = MSB) or shift index into `SHIFTS` (phase kinds); -1 for
            references.
        projector_width, projector_height: Resolution of the projector the patterns are meant for.
        fringe_width: Fringe period in projector pixels, if the stack holds phase patterns.
    """
    images: torch.Tensor
    kinds: tuple
    indices: tuple
    projector_width: int
    projector_height: int
    fringe_width: float = None

    def __post_init__(self):
        images = torch.as_tensor(self.images)
        if images.ndimension() != 3 or images.dtype != torch.uint8:
            raise ValueError("images must be a uint8 tensor of shape (count, height, width). It instead has shape {} "
                             "and dtype {}.".format(tuple(images.shape), images.dtype))
        kinds = tuple(self.kinds)
        indices = tuple(int(i) for i in self.indices)
        if len(kinds) != images.size(0) or len(indices) != images.size(0):
            raise errors.StackMismatch("Stack has {} images but {} kinds and {} indices."
                                       .format(images.size(0), len(kinds), len(indices)))
        for kind in kinds:
            if kind not in KINDS:
                raise ValueError("Unknown pattern kind {!r}.".format(kind))
        object.__setattr__(self, 'images', images)
        object.__setattr__(self, 'kinds', kinds)
        object.__setattr__(self, 'indices', indices)
        object.__setattr__(self, 'projector_width', int(self.projector_width))
        object.__setattr__(self, 'projector_height', int(self.projector_height))
        for axis in ('x', 'y'):
            bits = gray_bits(_axis_extent(axis, self.projector_width, self.projector_height))
            for kind in ('gray-' + axis, 'gray-' + axis + '-inverse'):
                count = kinds.count(kind)
                if count not in (0, bits):
                    raise errors.StackMismatch("{} images of kind {!r}, expected {} for a projector extent of {}."
                                               .format(count, kind, bits, _axis_extent(axis, self.projector_width,
                                                                                       self.projector_height)))
        if any(kind.startswith('phase') for kind in kinds) and self.fringe_width is None:
            raise ValueError("Stacks holding phase patterns must carry their fringe_width.")

    def __len__(self):
        return self.images.size(0)

    @property
    def height(self):
        return self.images.size(1)

    @property
    def width(self):
        return self.images.size(2)

    def has(self, kind):
        return kind in self.kinds

    def select(self, kind):
        """Returns the images of one kind, ordered by index, as a (count, height, width) tensor."""
        positions = sorted((index, position) for position, (k, index) in enumerate(zip(self.kinds, self.indices))
                           if k == kind)
        if len(positions) == 0:
            raise errors.StackMismatch("Stack holds no images of kind {!r}.".format(kind))
        return self.images[[position for _, position in positions]]

    def with_images(self, images):
        """The same pattern sequence, with new (typically captured) images."""
        return dataclasses.replace(self, images=images)

    def concat(self, other):
        if (self.projector_width, self.projector_height) != (other.projector_width, other.projector_height):
            raise errors.StackMismatch("Cannot concatenate stacks for different projector resolutions.")
        if self.images.shape[1:] != other.images.shape[1:]:
            raise errors.StackMismatch("Cannot concatenate stacks of images of shapes {} and {}."
                                       .format(tuple(self.images.shape[1:]), tuple(other.images.shape[1:])))
        fringe_width = self.fringe_width if self.fringe_width is not None else other.fringe_width
        return PatternStack(torch.cat([self.images, other.images]), self.kinds + other.kinds,
                            self.indices + other.indices, self.projector_width, self.projector_height, fringe_width)


@dataclasses.dataclass(frozen=True, eq=False)
class CorrespondenceMap:
    """Per camera pixel, the decoded projector coordinates.

    Attributes:
        proj_x, proj_y: float64 tensors of shape (height, width) of continuous projector coordinates, NaN where
            invalid; None if that axis was not decoded.
        valid: bool tensor of shape (height, width).
        reason: uint8 tensor of shape (height, width) of `REASONS` codes; REASON_VALID exactly where valid.
        projector_width, projector_height: Projector resolution.
        direct_light, global_light: Optional float64 tensors of the direct/global separation.
        fringe_order: Optional int64 tensor of fringe orders K (phase decoding only), -1 where unknown.
    """
    proj_x: torch.Tensor
    proj_y: torch.Tensor
    valid: torch.Tensor
    reason: torch.Tensor
    projector_width: int
    projector_height: int
    direct_light: torch.Tensor = None
    global_light: torch.Tensor = None
    fringe_order: torch.Tensor = None

    def __post_init__(self):
        valid = torch.as_tensor(self.valid, dtype=torch.bool)
        reason = torch.as_tensor(self.reason, dtype=torch.uint8)
        if valid.ndimension() != 2 or reason.shape != valid.shape:
            raise ValueError("valid and reason must be of the same shape (height, width). They instead have shapes "
                             "{} and {}.".format(tuple(valid.shape), tuple(reason.shape)))
        object.__setattr__(self, 'valid', valid)
        object.__setattr__(self, 'reason', reason)
        for name, extent in (('proj_x', self.projector_width), ('proj_y', self.projector_height)):
            value = getattr(self, name)
            if value is None:
                continue
            value = torch.as_tensor(value, dtype=torch.float64)
            if value.shape != valid.shape:
                raise ValueError("{} has shape {} but the map has shape {}."
                                 .format(name, tuple(value.shape), tuple(valid.shape)))
            inside = valid.logical_not() | ((value >= 0) & (value < extent))
            if not inside.all():
                raise ValueError("{} has valid pixels outside [0, {}).".format(name, extent))
            object.__setattr__(self, name, value)
        for name in ('direct_light', 'global_light'):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, torch.as_tensor(value, dtype=torch.float64))
        if self.fringe_order is not None:
            object.__setattr__(self, 'fringe_order', torch.as_tensor(self.fringe_order, dtype=torch.int64))

    @classmethod
    def invalid(cls, height, width, projector_width, projector_height, axes=('x', 'y'),
                reason=REASON_UNCERTAIN_BIT):
        """A map in which no pixel is valid."""
        nan = torch.full((height, width), math.nan, dtype=torch.float64)
        return cls(proj_x=nan.clone() if 'x' in axes else None,
                   proj_y=nan.clone() if 'y' in axes else None,
                   valid=torch.zeros(height, width, dtype=torch.bool),
                   reason=torch.full((height, width), reason, dtype=torch.uint8),
                   projector_width=projector_width,
                   projector_height=projector_height)

    @property
    def height(self):
        return self.valid.size(0)

    @property
    def width(self):
        return self.valid.size(1)

    @property
    def axes(self):
        return tuple(axis for axis, value in (('x', self.proj_x), ('y', self.proj_y)) if value is not None)

    @property
    def valid_count(self):
        return int(self.valid.sum())

    def reason_counts(self):
        return {name: int((self.reason == code).sum()) for code, name in REASONS.items()}


###################
# Gray codes
###################

def gray_encode(index, bits):
    """Reflected binary gray code of `index`, as a `bits`-long string of '0'/'1', MSB first.

    Raises:
        OutOfRange if index >= 2 ** bits.
    """
    index = int(index)
    bits = int(bits)
    if bits < 1:
        raise ValueError("bits must be positive. It is instead {}.".format(bits))
    if index < 0 or index >= 2 ** bits:
        raise errors.OutOfRange("index {} cannot be encoded in {} bits.".format(index, bits))
    return format(index ^ (index >> 1), '0{}b'.format(bits))


def gray_decode(code):
    """Inverse of `gray_encode`: prefix-XOR of the bits, MSB first.

    Raises:
        MalformedCode if `code` is empty or holds characters other than '0' and '1'.
    """
    if not isinstance(code, str) or len(code) == 0 or set(code) - {'0', '1'}:
        raise errors.MalformedCode("Gray code must be a non-empty string of '0' and '1'. Got {!r}.".format(code))
    value = 0
    bit = 0
    for character in code:
        bit ^= (character == '1')
        value = (value << 1) | bit
    return value


def gray_decode_planes(bit_planes):
    """Decodes a (bits, ...) tensor of 0/1 gray-code bits (MSB first) into an int64 tensor of shape (...)."""
    bit_planes = torch.as_tensor(bit_planes).to(torch.int64)
    binary = torch.cumsum(bit_planes, dim=0) % 2
    bits = bit_planes.size(0)
    weights = 2 ** torch.arange(bits - 1, -1, -1, dtype=torch.int64)
    return (binary * weights.view(bits, *([1] * (bit_planes.ndimension() - 1)))).sum(dim=0)


###################
# Generation
###################

def generate_gray_stack(projector_width, projector_height, axis, with_inverses=True, with_references=True):
    """Generates the gray-code patterns encoding every projector column (axis 'x') or row (axis 'y').

    In image i, column c is white (255) iff bit i (MSB first) of gray_encode(c) is '1'.

    Arguments:
        projector_width, projector_height: Projector resolution.
        axis: 'x' or 'y'.
        with_inverses: Whether to append the inverse (255 - pattern) of every image.
        with_references: Whether to append an all-white and an all-black image.

    Returns:
        A `PatternStack` at projector resolution.
    """
    extent = _axis_extent(axis, projector_width, projector_height)
    bits = gray_bits(extent)
    coords = torch.arange(extent, dtype=torch.int64)
    codes = coords ^ (coords >> 1)
    planes = torch.stack([((codes >> (bits - 1 - i)) & 1) for i in range(bits)]).to(torch.uint8) * 255
    if axis == 'x':
        patterns = planes.unsqueeze(1).expand(bits, projector_height, projector_width)
    else:
        patterns = planes.unsqueeze(2).expand(bits, projector_height, projector_width)

    images = [patterns]
    kinds = ['gray-' + axis] * bits
    indices = list(range(bits))
    if with_inverses:
        images.append(255 - patterns)
        kinds += ['gray-' + axis + '-inverse'] * bits
        indices += list(range(bits))
    if with_references:
        images.append(torch.full((1, projector_height, projector_width), 255, dtype=torch.uint8))
        images.append(torch.zeros(1, projector_height, projector_width, dtype=torch.uint8))
        kinds += ['reference-white', 'reference-black']
        indices += [-1, -1]
    return PatternStack(torch.cat(images).contiguous(), tuple(kinds), tuple(indices), projector_width,
                        projector_height)


def generate_phase_stack(projector_width, projector_height, axis, params=PhasePatternParams()):
    """Generates three phase-shifted sinusoids, I_k = bias + amplitude * cos(2 pi x / fringe_width + shift_k), with x
    the integer projector column (or row).

    Intensities are rounded half-up to integers in [0, 255].

    Returns:
        A `PatternStack` of three images at projector resolution, with shifts (-2pi/3, 0, +2pi/3).
    """
    extent = _axis_extent(axis, projector_width, projector_height)
    phase = 2 * math.pi * torch.arange(extent, dtype=torch.float64) / params.fringe_width
    lines = torch.stack([misc.to_uint8(params.bias + params.amplitude * torch.cos(phase + shift))
                         for shift in SHIFTS])
    if axis == 'x':
        images = lines.unsqueeze(1).expand(3, projector_height, projector_width)
    else:
        images = lines.unsqueeze(2).expand(3, projector_height, projector_width)
    return PatternStack(images.contiguous(), ('phase-' + axis,) * 3, (0, 1, 2), projector_width, projector_height,
                        fringe_width=float(params.fringe_width))


def generate_patterns(projector_width, projector_height, mode='gray', params=PhasePatternParams()):
    """The full sequence used for scanning: gray codes and inverses for both axes, then (for mode 'phase') phase
    patterns for both axes, then the two references."""
    if mode not in ('gray', 'phase'):
        raise ValueError("mode must be 'gray' or 'phase'. It is instead {!r}.".format(mode))
    stack = generate_gray_stack(projector_width, projector_height, 'x', with_references=False)
    stack = stack.concat(generate_gray_stack(projector_width, projector_height, 'y', with_references=False))
    if mode == 'phase':
        stack = stack.concat(generate_phase_stack(projector_width, projector_height, 'x', params))
        stack = stack.concat(generate_phase_stack(projector_width, projector_height, 'y', params))
    references = torch.stack([torch.full((projector_height, projector_width), 255, dtype=torch.uint8),
                              torch.zeros(projector_height, projector_width, dtype=torch.uint8)])
    return stack.concat(PatternStack(references, ('reference-white', 'reference-black'), (-1, -1), projector_width,
                                     projector_height))


###################
# Decoding
###################

def high_frequency_images(stack, bits=2):
    """The `bits` least significant gray patterns of every decoded axis, together with their inverses."""
    images = []
    for axis in ('x', 'y'):
        if stack.has('gray-' + axis) and stack.has('gray-' + axis + '-inverse'):
            images.append(stack.select('gray-' + axis)[-bits:])
            images.append(stack.select('gray-' + axis + '-inverse')[-bits:])
    if len(images) == 0:
        raise errors.StackMismatch("Direct/global separation needs gray patterns together with their inverses.")
    return torch.cat(images)


def separate_direct_global(images):
    """Splits the light at every pixel into a direct and a global component.

    For binary high-frequency illumination with a 50% duty cycle, direct = Lmax - Lmin and global = 2 Lmin, where
    Lmax and Lmin are taken over the stack at each pixel.

    Arguments:
        images: A captured `PatternStack` (its highest-frequency gray pairs are used) or a tensor of shape
            (count, height, width), count >= 3.

    Returns:
        A tuple (direct, global) of float64 tensors of shape (height, width).
    """
    if isinstance(images, PatternStack):
        images = high_frequency_images(images)
    images = torch.as_tensor(images)
    if images.ndimension() != 3 or images.size(0) < 3:
        raise ValueError("Need at least 3 shifted high-frequency images of shape (height, width). Got shape {}."
                         .format(tuple(images.shape)))
    images = images.to(torch.float64)
    maximum = images.max(dim=0).values
    minimum = images.min(dim=0).values
    return maximum - minimum, 2 * minimum


def classify_bits(p, q, direct, global_, min_direct=5.):
    """Vectorised `classify_bit`: returns an int8 tensor of BIT_ONE, BIT_ZERO or BIT_UNCERTAIN."""
    p, q, direct, global_ = torch.broadcast_tensors(*[torch.as_tensor(v, dtype=torch.float64)
                                                      for v in (p, q, direct, global_)])
    one = torch.full(p.shape, BIT_ONE, dtype=torch.int8)
    zero = torch.full(p.shape, BIT_ZERO, dtype=torch.int8)
    out = torch.full(p.shape, BIT_UNCERTAIN, dtype=torch.int8)

    direct_dominates = direct > global_
    rule_zero = direct_dominates.logical_not() & (p < direct) & (q > global_)
    rule_one = direct_dominates.logical_not() & rule_zero.logical_not() & (p > global_) & (q < direct)
    out = torch.where(rule_one, one, out)
    out = torch.where(rule_zero, zero, out)
    out = torch.where(direct_dominates, torch.where(p > q, one, zero), out)
    out = torch.where(direct < min_direct, torch.full_like(out, BIT_UNCERTAIN), out)
    return out


def classify_bit(p, q, direct, global_, min_direct=5.):
    """Classifies one bit of one pixel from its intensity p under the pattern and q under the inverse pattern.

    Rules, in order:
        1. direct < min_direct: uncertain.
        2. direct > global: one if p > q, else zero.
        3. p < direct and q > global: zero.
        4. p > global and q < direct: one.
        5. otherwise uncertain.

    Returns:
        One of 'one', 'zero', 'uncertain'.
    """
    value = classify_bits(p, q, direct, global_, min_direct).item()
    return {BIT_ONE: 'one', BIT_ZERO: 'zero', BIT_UNCERTAIN: 'uncertain'}[value]


def _check_captured(stack):
    if not isinstance(stack, PatternStack):
        raise ValueError("Expected a captured PatternStack, got {}.".format(type(stack).__name__))


def decode_gray(stack, direct=None, global_=None, min_direct=5.):
    """Decodes a captured gray-code stack (with inverses) into a correspondence map.

    Every bit of every pixel is classified with `classify_bits`; a pixel with any uncertain bit is invalid. Decoded
    integer coordinates are reported at the projector pixel centre, c + 0.5.

    Arguments:
        stack: Captured `PatternStack` holding gray-x and/or gray-y patterns together with their inverses.
        direct, global_: Optional direct/global maps; computed from `stack` with `separate_direct_global` if omitted.
        min_direct: Minimum direct light for a bit to be decidable, in 8-bit intensity levels.

    Returns:
        A `CorrespondenceMap` at camera resolution.

    Raises:
        StackMismatch if the stack holds no decodable axis, lacks inverses, or the direct/global maps do not match
        the image size.
    """
    _check_captured(stack)
    if direct is None or global_ is None:
        direct, global_ = separate_direct_global(stack)
    direct = torch.as_tensor(direct, dtype=torch.float64)
    global_ = torch.as_tensor(global_, dtype=torch.float64)
    shape = (stack.height, stack.width)
    if direct.shape != shape or global_.shape != shape:
        raise errors.StackMismatch("Direct/global maps of shapes {} and {} do not match images of shape {}."
                                   .format(tuple(direct.shape), tuple(global_.shape), shape))

    low_direct = direct < min_direct
    uncertain = torch.zeros(shape, dtype=torch.bool)
    out_of_range = torch.zeros(shape, dtype=torch.bool)
    coords = {}
    for axis in ('x', 'y'):
        kind = 'gray-' + axis
        if not stack.has(kind):
            continue
        if not stack.has(kind + '-inverse'):
            raise errors.StackMismatch("Robust decoding of {!r} needs its inverse patterns.".format(kind))
        extent = _axis_extent(axis, stack.projector_width, stack.projector_height)
        classes = classify_bits(stack.select(kind), stack.select(kind + '-inverse'), direct, global_, min_direct)
        uncertain |= (classes == BIT_UNCERTAIN).any(dim=0)
        code = gray_decode_planes(classes.clamp(min=0))
        out_of_range |= code >= extent
        coords[axis] = code.to(torch.float64) + 0.5
    if len(coords) == 0:
        raise errors.StackMismatch("Stack holds no gray-code patterns to decode.")

    reason = torch.zeros(shape, dtype=torch.uint8)
    reason[out_of_range] = REASON_OUT_OF_RANGE
    reason[uncertain] = REASON_UNCERTAIN_BIT
    reason[low_direct] = REASON_LOW_DIRECT
    valid = reason == REASON_VALID
    for axis in coords:
        coords[axis] = torch.where(valid, coords[axis], torch.full_like(coords[axis], math.nan))
    logger.debug("Gray decoding: %d of %d pixels valid.", int(valid.sum()), valid.numel())
    return CorrespondenceMap(proj_x=coords.get('x'), proj_y=coords.get('y'), valid=valid, reason=reason,
                             projector_width=stack.projector_width, projector_height=stack.projector_height,
                             direct_light=direct, global_light=global_)


def decode_gray_naive(stack, min_contrast=5.):
    """Baseline decoding: a bit is one where the pattern is brighter than the mid-level of the two references.

    Pixels whose white and black references differ by less than `min_contrast` are invalid. No inverses needed.
    """
    _check_captured(stack)
    white = stack.select('reference-white')[0].to(torch.float64)
    black = stack.select('reference-black')[0].to(torch.float64)
    threshold = (white + black) / 2
    shape = (stack.height, stack.width)
    out_of_range = torch.zeros(shape, dtype=torch.bool)
    coords = {}
    for axis in ('x', 'y'):
        kind = 'gray-' + axis
        if not stack.has(kind):
            continue
        extent = _axis_extent(axis, stack.projector_width, stack.projector_height)
        code = gray_decode_planes(stack.select(kind).to(torch.float64) > threshold)
        out_of_range |= code >= extent
        coords[axis] = code.to(torch.float64) + 0.5
    if len(coords) == 0:
        raise errors.StackMismatch("Stack holds no gray-code patterns to decode.")
    reason = torch.zeros(shape, dtype=torch.uint8)
    reason[out_of_range] = REASON_OUT_OF_RANGE
    reason[(white - black) < min_contrast] = REASON_LOW_DIRECT
    valid = reason == REASON_VALID
    for axis in coords:
        coords[axis] = torch.where(valid, coords[axis], torch.full_like(coords[axis], math.nan))
    return CorrespondenceMap(proj_x=coords.get('x'), proj_y=coords.get('y'), valid=valid, reason=reason,
                             projector_width=stack.projector_width, projector_height=stack.projector_height)


@dataclasses.dataclass(frozen=True, eq=False)
class WrappedPhase:
    phase: torch.Tensor
    modulation: torch.Tensor
    valid: torch.Tensor


def decode_phase(I1, I2, I3, min_modulation=5.):
    """Recovers the wrapped phase of three images shifted by -2pi/3, 0 and +2pi/3.

    phi = atan2(sqrt(3) (I1 - I3), 2 I2 - I1 - I3), shifted into [0, 2 pi).

    Returns:
        A `WrappedPhase` holding the phase, the fringe modulation (amplitude, in intensity levels) and a validity
        mask that is false where the modulation is below `min_modulation`.
    """
    I1, I2, I3 = (torch.as_tensor(I, dtype=torch.float64) for I in (I1, I2, I3))
    if not (I1.shape == I2.shape == I3.shape):
        raise ValueError("The three phase images must share a shape. Got {}, {} and {}."
                         .format(tuple(I1.shape), tuple(I2.shape), tuple(I3.shape)))
    numerator = math.sqrt(3) * (I1 - I3)
    denominator = 2 * I2 - I1 - I3
    phase = torch.remainder(torch.atan2(numerator, denominator), 2 * math.pi)
    # remainder can round a tiny negative angle up to exactly 2 pi
    phase = torch.where(phase >= 2 * math.pi, phase - 2 * math.pi, phase)
    modulation = torch.sqrt(numerator ** 2 + denominator ** 2) / 3
    return WrappedPhase(phase=phase, modulation=modulation, valid=modulation >= min_modulation)


def unwrap_phase(wrapped, fringe_order, fringe_width):
    """Absolute projector coordinate from the wrapped phase and fringe order: fringe_width * (phi + 2 pi K) / 2 pi."""
    wrapped = torch.as_tensor(wrapped, dtype=torch.float64)
    fringe_order = torch.as_tensor(fringe_order, dtype=torch.float64)
    return fringe_width * (wrapped + 2 * math.pi * fringe_order) / (2 * math.pi)


def fringe_orders_from_gray(gray, fringe_width, wrapped=None, axis='x'):
    """Fringe orders K = floor(gray coordinate / fringe_width), snapped by +-1 towards phase consistency.

    Near a fringe boundary the gray coordinate and the wrapped phase can disagree about which fringe a pixel is in;
    when the phase implied by the gray coordinate differs from `wrapped` by more than pi, K moves by one.

    Arguments:
        gray: A `CorrespondenceMap` (its `axis` coordinates are used) or a tensor of gray-decoded coordinates.
        fringe_width: Fringe period in projector pixels.
        wrapped: Optional wrapped phase in [0, 2 pi), same shape.
        axis: Which axis of a `CorrespondenceMap` to use.

    Returns:
        int64 tensor of fringe orders; -1 where the gray coordinate is unknown.
    """
    if isinstance(gray, CorrespondenceMap):
        coords = gray.proj_x if axis == 'x' else gray.proj_y
        if coords is None:
            raise errors.MissingAxis("The gray map has no decoded {} axis.".format(axis))
    else:
        coords = torch.as_tensor(gray, dtype=torch.float64)
    order = torch.floor(coords / fringe_width)
    if wrapped is not None:
        wrapped = torch.as_tensor(wrapped, dtype=torch.float64)
        residue = 2 * math.pi * (coords / fringe_width - order)
        difference = residue - wrapped
        order = order + (difference > math.pi).to(torch.float64) - (difference < -math.pi).to(torch.float64)
    known = torch.isfinite(order)
    return torch.where(known, order, torch.full_like(order, -1)).to(torch.int64)


def decode_hybrid(stack, min_direct=5., min_modulation=5.):
    """Sub-pixel decoding: wrapped phase per axis, unwrapped with fringe orders taken from the gray codes.

    Axes without phase patterns keep their gray (pixel-centre) coordinates.

    Returns:
        A `CorrespondenceMap`, whose `fringe_order` holds K for the x axis (or the y axis if x has no phase).
    """
    _check_captured(stack)
    gray = decode_gray(stack, min_direct=min_direct)
    valid = gray.valid.clone()
    reason = gray.reason.clone()
    coords = {'x': gray.proj_x, 'y': gray.proj_y}
    fringe_order = None
    for axis in ('x', 'y'):
        kind = 'phase-' + axis
        if not stack.has(kind) or coords[axis] is None:
            continue
        I1, I2, I3 = stack.select(kind)
        wrapped = decode_phase(I1, I2, I3, min_modulation=min_modulation)
        # Fringes are sampled at integer columns; gray coordinates and the result sit at pixel centres.
        order = fringe_orders_from_gray(coords[axis] - 0.5, stack.fringe_width, wrapped.phase)
        unwrapped = unwrap_phase(wrapped.phase, order, stack.fringe_width) + 0.5
        extent = _axis_extent(axis, stack.projector_width, stack.projector_height)
        low_modulation = valid & wrapped.valid.logical_not()
        reason[low_modulation] = REASON_LOW_MODULATION
        outside = valid & wrapped.valid & ((unwrapped < 0) | (unwrapped >= extent))
        reason[outside] = REASON_OUT_OF_RANGE
        valid = valid & wrapped.valid & outside.logical_not()
        coords[axis] = unwrapped
        if fringe_order is None:
            fringe_order = torch.where(valid, order, torch.full_like(order, -1))
    for axis in coords:
        if coords[axis] is not None:
            coords[axis] = torch.where(valid, coords[axis], torch.full_like(coords[axis], math.nan))
    return CorrespondenceMap(proj_x=coords['x'], proj_y=coords['y'], valid=valid, reason=reason,
                             projector_width=stack.projector_width, projector_height=stack.projector_height,
                             direct_light=gray.direct_light, global_light=gray.global_light,
                             fringe_order=fringe_order)


def decode(stack, min_direct=5., min_modulation=5.):
    """Decodes whatever the stack holds: hybrid phase decoding if phase patterns are present, gray otherwise."""
    if any(kind.startswith('phase') for kind in stack.kinds):
        return decode_hybrid(stack, min_direct=min_direct, min_modulation=min_modulation)
    return decode_gray(stack, min_direct=min_direct)


def correspondence_to_images(corr):
    """Renders the decoded coordinates as 8-bit gradient images (black where invalid), keyed by axis."""
    out = {}
    for axis, coords, extent in (('x', corr.proj_x, corr.projector_width), ('y', corr.proj_y, corr.projector_height)):
        if coords is None:
            continue
        scaled = torch.where(corr.valid, coords / extent * 255, torch.zeros_like(coords))
        out[axis] = misc.to_uint8(scaled)
    return out
