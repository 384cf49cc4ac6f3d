# multires.py

"""
This code implements the decomposition of an image into a stack of
resolutions. Every 2x2 patch of a fine image x_s is mapped by a fixed 4x4
matrix onto three detail coefficients y_s and the patch average, which is
one pixel of the next coarser image x_{s+1}.

Two matrices are provided. The unimodular one has a determinant of 1, so the
decomposition costs nothing in log-likelihood. The Haar one is the discrete
Haar wavelet transform scaled so that the average row is the same; it costs
log(1/2) per patch.

Patches are read in row-major order: x1 top-left, x2 top-right, x3
bottom-left, x4 bottom-right. Details are stored as three channel groups at
the coarse resolution, shape (3C, H/2, W/2), so they concatenate with the
coarse image without resampling. All functions act on the last three axes,
so a leading batch axis is allowed.
"""

import math

import numpy

from .tensor import Tensor
from .tensor import as_tensor
from .tensor import take
from .tensor import custom_op
from .errors import ContractError
from .errors import DimensionError

C = 2. ** (2. / 3.)
A = 4.

KINDS = ('unimodular', 'haar')

# sign patterns of the three detail rows over (x1, x2, x3, x4)
_DETAIL_SIGNS = numpy.array([
	[1., 1., -1., -1.],
	[1., -1., 1., -1.],
	[1., -1., -1., 1.]
])


def _scale(kind):
	if kind == 'unimodular':
		return C
	if kind == 'haar':
		return 2.

	raise ContractError("transform kind must be 'unimodular' or 'haar', got "
		"{!r}".format(kind))

def _values(x):
	return x.data if isinstance(x, Tensor) else numpy.asarray(x, dtype='float64')

def _check_even(x, name):
	if x.ndim < 3:
		raise DimensionError("{} needs a (C, H, W) image, got shape {}".format(
			name, x.shape))
	if x.shape[-1] % 2 != 0 or x.shape[-2] % 2 != 0:
		raise DimensionError("{} needs even spatial extents, got {}x{}".format(
			name, x.shape[-2], x.shape[-1]))

def _patches(x):
	return (x[..., 0::2, 0::2], x[..., 0::2, 1::2], x[..., 1::2, 0::2],
		x[..., 1::2, 1::2])

def _patch_mean(x1, x2, x3, x4):
	return (x1 + x2 + x3 + x4) * 0.25


class TransformMatrix(object):
	"""The 4x4 patch transform and its inverse.

	M maps (y1, y2, y3, x_bar) to the four pixels of a patch, and M^-1 maps
	the pixels back. The average row of M^-1 is exactly [1/4, 1/4, 1/4, 1/4].

	Parameters
	----------
	kind : str
		'unimodular' (detail rows scaled by 1/c with c = 2^(2/3)) or 'haar'
		(detail rows scaled by 1/2).

	Attributes
	----------
	forward : numpy.ndarray, shape=(4, 4)
		M.

	inverse : numpy.ndarray, shape=(4, 4)
		M^-1.

	log_abs_det_inverse : float
		log|det M^-1|, exactly 0.0 for unimodular and log(1/2) for haar.
	"""

	def __init__(self, kind='unimodular'):
		scale = _scale(kind)

		self.kind = kind
		self.c = C
		self.a = A
		self.scale = scale
		self.inverse = numpy.vstack([_DETAIL_SIGNS / scale, numpy.full((1, 4), 1. / A)])
		self.forward = numpy.hstack([_DETAIL_SIGNS.T * (scale / A), numpy.ones((4, 1))])
		self.log_abs_det_inverse = 0. if kind == 'unimodular' else math.log(0.5)


class NoiseSchedule(object):
	"""The variances of the Gaussian priors at every level.

	With the schedule enabled, the variances are the ones obtained by pushing
	unit Gaussian noise at the finest level through the decomposition: the
	coarse image at level s has variance (1/4)^(s-1), and the details at
	level s have variance 4/scale^2 * (1/4)^(s-1), which is c * (1/4)^(s-1)
	for the unimodular transform. Disabled, every variance is 1.

	Parameters
	----------
	levels : int
		The number of levels S.

	enabled : bool
		Whether to use the multi-resolution variances.

	kind : str
		The transform kind the schedule is pushed through.

	finest_offset : int
		Shifts the exponent by this many levels. A model grown by one finer
		level uses an offset of 1 so its coarse levels keep their variances.
	"""

	def __init__(self, levels, enabled=True, kind='unimodular', finest_offset=0):
		if int(levels) != levels or levels < 1:
			raise ContractError("levels must be a positive integer.")
		if int(finest_offset) != finest_offset or finest_offset < 0:
			raise ContractError("finest_offset must be a non-negative integer.")

		self.levels = int(levels)
		self.enabled = bool(enabled)
		self.kind = kind
		self.finest_offset = int(finest_offset)
		self.detail_factor = 4. / _scale(kind) ** 2

	def variance(self, level, role):
		return noise_variance(self, level, role)

	def variances(self):
		"""(level, role, variance) for every prior of a model, finest first."""

		rows = [(s, 'detail', self.variance(s, 'detail')) for s in range(1, self.levels)]
		rows.append((self.levels, 'base', self.variance(self.levels, 'base')))
		return rows


class ResolutionStack(object):
	"""An image decomposed as (y_1, ..., y_{S-1}, x_S).

	Attributes
	----------
	levels : int
		S.

	details : list of numpy.ndarray
		y_s for s = 1..S-1, each of shape (..., 3C, H_{s+1}, W_{s+1}).

	base : numpy.ndarray
		x_S, shape (..., C, H_S, W_S).

	kind : str
		The transform kind.

	logdet_total : float
		sum over levels of dims(x_{s+1}) * log|det M^-1|, per image.
	"""

	def __init__(self, details, base, kind='unimodular', logdet_total=None):
		self.details = list(details)
		self.base = base
		self.kind = kind
		self.levels = len(self.details) + 1

		for s, y in enumerate(self.details):
			coarse = self.details[s + 1] if s + 1 < len(self.details) else None
			if coarse is not None and (y.shape[-2] != 2 * coarse.shape[-2] or
				y.shape[-1] != 2 * coarse.shape[-1]):
				raise DimensionError("detail level {} has shape {} which is not "
					"twice level {}".format(s + 1, y.shape, s + 2))

		if logdet_total is None:
			log_det = TransformMatrix(kind).log_abs_det_inverse
			logdet_total = sum(_per_image_dims(y) / 3 * log_det for y in self.details)
			logdet_total = float(logdet_total)

		self.logdet_total = logdet_total

	@property
	def shapes(self):
		"""The per-image shapes of the details and the base."""

		return [y.shape[-3:] for y in self.details] + [self.base.shape[-3:]]


def _per_image_dims(x):
	return int(numpy.prod(x.shape[-3:]))

def downsample_avg(x):
	"""Average every 2x2 patch.

	Parameters
	----------
	x : Tensor or numpy.ndarray, shape=(..., C, H, W)
		H and W must be even.

	Returns
	-------
	x_bar : same type, shape=(..., C, H/2, W/2)
	"""

	data = _values(x)
	_check_even(data, 'downsample_avg')
	x_bar = _patch_mean(*_patches(data))
	if not isinstance(x, Tensor):
		return x_bar

	def rule(g):
		return (numpy.repeat(numpy.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

	return custom_op(x_bar, (x,), rule)

def _gather(data, scale):
	x1, x2, x3, x4 = _patches(data)
	y1 = (x1 + x2 - x3 - x4) / scale
	y2 = (x1 - x2 + x3 - x4) / scale
	y3 = (x1 - x2 - x3 + x4) / scale
	return numpy.concatenate([y1, y2, y3], axis=-3), _patch_mean(x1, x2, x3, x4)

def _scatter(y, coarse, w):
	n = coarse.shape[-3]
	y1, y2, y3 = y[..., :n, :, :], y[..., n:2 * n, :, :], y[..., 2 * n:, :, :]

	shape = coarse.shape[:-2] + (2 * coarse.shape[-2], 2 * coarse.shape[-1])
	x = numpy.empty(shape, dtype=numpy.result_type(y, coarse))
	x[..., 0::2, 0::2] = (y1 + y2 + y3) * w + coarse
	x[..., 0::2, 1::2] = (y1 - y2 - y3) * w + coarse
	x[..., 1::2, 0::2] = (-y1 + y2 - y3) * w + coarse
	x[..., 1::2, 1::2] = (-y1 - y2 + y3) * w + coarse
	return x

def patch_split(x, kind='unimodular'):
	"""Apply M^-1 to every 2x2 patch of x.

	Parameters
	----------
	x : Tensor or numpy.ndarray, shape=(..., C, 2h, 2w)

	kind : str
		'unimodular' or 'haar'.

	Returns
	-------
	y : same type, shape=(..., 3C, h, w)
		The three detail groups stacked on the channel axis.

	x_bar : same type, shape=(..., C, h, w)
		The patch averages.
	"""

	scale = _scale(kind)
	data = _values(x)
	_check_even(data, 'patch_split')

	y, x_bar = _gather(data, scale)
	if not isinstance(x, Tensor):
		return y, x_bar

	# y and x_bar are recorded as one op and sliced apart
	n = 3 * data.shape[-3]

	def rule(g):
		return (_scatter(g[..., :n, :, :], g[..., n:, :, :] * 0.25, 1. / scale),)

	joint = custom_op(numpy.concatenate([y, x_bar], axis=-3), (x,), rule)
	every = slice(None)
	return (take(joint, (Ellipsis, slice(None, n), every, every)),
		take(joint, (Ellipsis, slice(n, None), every, every)))

def patch_merge(y, x_bar, kind='unimodular'):
	"""Apply M to every (y, x_bar) position, the exact inverse of
	patch_split. The result is a Tensor when either input is.
	"""

	w = _scale(kind) / A
	y_data, coarse = _values(y), _values(x_bar)

	if coarse.ndim < 3 or y_data.shape[:-3] != coarse.shape[:-3] or \
		y_data.shape[-3:] != (3 * coarse.shape[-3],) + coarse.shape[-2:]:
		raise DimensionError("patch_merge: details of shape {} do not match a "
			"coarse image of shape {}".format(y_data.shape, coarse.shape))

	x = _scatter(y_data, coarse, w)
	if not isinstance(y, Tensor) and not isinstance(x_bar, Tensor):
		return x

	def rule(g):
		g_y, g_mean = _gather(g, 1. / w)
		return g_y, g_mean * 4.

	return custom_op(x, (as_tensor(y), as_tensor(x_bar)), rule)

def decompose(x, levels, kind='unimodular'):
	"""Split an image into S resolutions, finest to coarsest.

	Parameters
	----------
	x : Tensor or numpy.ndarray, shape=(..., C, H, W)
		H and W must be divisible by 2^(S-1).

	levels : int
		S, the number of resolutions.

	kind : str
		'unimodular' or 'haar'.

	Returns
	-------
	stack : ResolutionStack
		Its details and base are numpy arrays.
	"""

	if int(levels) != levels or levels < 1:
		raise ContractError("levels must be a positive integer.")

	data = _values(x)
	factor = 2 ** (levels - 1)
	if data.ndim < 3 or data.shape[-1] % factor != 0 or data.shape[-2] % factor != 0:
		raise DimensionError("an image of shape {} cannot be decomposed into {} "
			"levels; H and W must be divisible by {}".format(data.shape, levels,
			factor))

	_scale(kind)
	details, current = [], data
	for _ in range(levels - 1):
		y, current = patch_split(current, kind)
		details.append(y)

	return ResolutionStack(details, current, kind)

def compose(stack):
	"""Fold patch_merge from the coarsest level to the finest, returning x_1."""

	x = stack.base
	for y in reversed(stack.details):
		x = patch_merge(y, x, stack.kind)
	return x

def noise_variance(schedule, level, role):
	"""The prior variance of one level.

	Parameters
	----------
	schedule : NoiseSchedule

	level : int
		1 <= level <= S.

	role : str
		'detail' for y_level or 'base' for x_level.

	Returns
	-------
	variance : float
	"""

	if int(level) != level or not 1 <= level <= schedule.levels:
		raise ContractError("level must lie in [1, {}], got {}".format(
			schedule.levels, level))
	if role not in ('detail', 'base'):
		raise ContractError("role must be 'detail' or 'base', got {!r}".format(role))

	if not schedule.enabled:
		return 1.

	quarter = 0.25 ** (level - 1 - schedule.finest_offset)
	if role == 'base':
		return quarter
	return schedule.detail_factor * quarter
