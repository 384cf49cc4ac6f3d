# tensor.py

"""
This code implements dense N-dimensional tensors with reverse-mode automatic
differentiation. A Tensor wraps a contiguous numpy array. Operations are
recorded on the Tape that is active in the current thread, and a backward
sweep over that tape produces gradients for every leaf that requires them.

The tape is rebuilt on every forward pass, which lets the ODE solver unroll
a variable number of steps. Broadcasting is limited to scalar operands and
the channel bias of the convolution.
"""

import struct
import threading

import numpy

from numba import njit
from scipy.special import expit

from .errors import ContractError
from .errors import DimensionError
from .errors import FormatError

DTYPES = {
	'f32': numpy.dtype('float32'),
	'f64': numpy.dtype('float64'),
	'u8': numpy.dtype('uint8')
}

DTYPE_NAMES = {dtype: name for name, dtype in DTYPES.items()}

MRTF_MAGIC = b'MRTF'
MRTF_VERSION = 1
MRTF_CODES = {'f32': 0, 'f64': 1, 'u8': 2}
MRTF_DTYPES = {code: name for name, code in MRTF_CODES.items()}

_local = threading.local()

@njit(nogil=True)
def _im2col(xp, cols):
	n_samples, n_channels = xp.shape[0], xp.shape[1]
	height, width = xp.shape[2] - 2, xp.shape[3] - 2

	for n in range(n_samples):
		for c in range(n_channels):
			for di in range(3):
				for dj in range(3):
					k = c * 9 + di * 3 + dj
					for i in range(height):
						for j in range(width):
							cols[n, k, i * width + j] = xp[n, c, i + di, j + dj]

	return cols

@njit(nogil=True)
def _col2im(cols, xp):
	n_samples, n_channels = xp.shape[0], xp.shape[1]
	height, width = xp.shape[2] - 2, xp.shape[3] - 2

	for n in range(n_samples):
		for c in range(n_channels):
			for di in range(3):
				for dj in range(3):
					k = c * 9 + di * 3 + dj
					for i in range(height):
						for j in range(width):
							xp[n, c, i + di, j + dj] += cols[n, k, i * width + j]

	return xp


class Tape(object):
	"""An ordered record of differentiable operations.

	Use a tape as a context manager. While it is active in a thread, every
	operation whose inputs require gradients appends a node holding its
	inputs, its output and a backward rule. Since nodes are appended as they
	are computed the record is topologically ordered, and a backward sweep
	visits each node exactly once in reverse order.

	Attributes
	----------
	ops : list
		The recorded (inputs, output, backward rule) nodes.

	consumed : bool
		Whether a backward sweep has already run over this tape.
	"""

	def __init__(self):
		self.ops = []
		self.consumed = False
		self._previous = None

	def __enter__(self):
		self._previous = getattr(_local, 'tape', None)
		_local.tape = self
		return self

	def __exit__(self, *args):
		_local.tape = self._previous
		self._previous = None

	def __len__(self):
		return len(self.ops)

	@staticmethod
	def current():
		"""The tape active in this thread, or None."""

		return getattr(_local, 'tape', None)

	def record(self, inputs, output, rule):
		output.requires_grad = True
		output._tape = self
		self.ops.append((inputs, output, rule))

	def reset(self):
		"""Forget all recorded operations so the tape can be reused."""

		self.ops = []
		self.consumed = False

	def backward(self, loss):
		"""Accumulate d(loss)/d(leaf) into the grad field of every leaf.

		Parameters
		----------
		loss : Tensor
			A tensor with exactly one element, recorded on this tape.
		"""

		if loss.size != 1:
			raise ContractError("backward needs a scalar loss, got shape "
				"{}".format(loss.shape))
		if self.consumed:
			raise ContractError("backward was already called on this tape; "
				"call reset() and record a new forward pass first.")
		if loss._tape is not self:
			raise ContractError("the loss was not recorded on this tape.")

		cotangents = {id(loss): numpy.ones(loss.shape, dtype=loss.data.dtype)}

		for inputs, output, rule in reversed(self.ops):
			g = cotangents.pop(id(output), None)
			if g is None:
				continue

			for tensor, grad in zip(inputs, rule(g)):
				if grad is None or not tensor.requires_grad:
					continue

				if tensor._tape is self:
					key = id(tensor)
					if key in cotangents:
						cotangents[key] = cotangents[key] + grad
					else:
						cotangents[key] = grad
				elif tensor.grad is None:
					tensor.grad = numpy.array(grad, dtype=tensor.data.dtype)
				else:
					tensor.grad = tensor.grad + grad

		self.consumed = True


class Tensor(object):
	"""A dense N-dimensional array that can take part in a gradient tape.

	Parameters
	----------
	data : array-like
		The values. Floating point arrays keep their precision, uint8 arrays
		stay uint8, anything else becomes f64 unless dtype is given.

	dtype : str or None
		One of 'f32', 'f64' or 'u8'.

	requires_grad : bool
		Whether this tensor is a leaf whose gradient should be computed.

	Attributes
	----------
	data : numpy.ndarray
		The contiguous row-major buffer.

	grad : numpy.ndarray or None
		The accumulated gradient of a leaf after a backward pass.
	"""

	__array_priority__ = 100

	def __init__(self, data, dtype=None, requires_grad=False):
		if isinstance(data, Tensor):
			data = data.data

		if dtype is not None:
			if dtype not in DTYPES:
				raise ContractError("dtype must be one of 'f32', 'f64', 'u8'.")
			array = numpy.require(data, dtype=DTYPES[dtype], requirements='C')
		else:
			array = numpy.asarray(data)
			if array.dtype not in DTYPE_NAMES:
				array = array.astype('float64')
			array = numpy.require(array, requirements='C')

		if requires_grad and array.dtype == DTYPES['u8']:
			raise ContractError("u8 tensors cannot take part in a gradient tape.")

		self.data = array
		self.requires_grad = requires_grad
		self.grad = None
		self._tape = None

	def __repr__(self):
		return "Tensor(shape={}, dtype={}, requires_grad={})".format(
			self.shape, self.dtype, self.requires_grad)

	@property
	def shape(self):
		return tuple(self.data.shape)

	@property
	def dtype(self):
		return DTYPE_NAMES[self.data.dtype]

	@property
	def size(self):
		return int(self.data.size)

	@property
	def ndim(self):
		return self.data.ndim

	def numpy(self):
		return self.data.copy()

	def item(self):
		if self.size != 1:
			raise ContractError("item() needs a tensor with one element.")
		return self.data.reshape(-1)[0].item()

	def detach(self):
		return Tensor(self.data)

	def zero_grad(self):
		self.grad = None

	def backward(self):
		backward(self)

	def __add__(self, other):
		return add(self, other)

	def __radd__(self, other):
		return add(self, other)

	def __sub__(self, other):
		return add(self, neg(other) if isinstance(other, Tensor) else -other)

	def __rsub__(self, other):
		return add(neg(self), other)

	def __mul__(self, other):
		return mul(self, other)

	def __rmul__(self, other):
		return mul(self, other)

	def __truediv__(self, other):
		if isinstance(other, Tensor):
			raise ContractError("division is only defined by a scalar.")
		return mul(self, 1. / other)

	def __neg__(self):
		return neg(self)

	def __matmul__(self, other):
		return matmul(self, other)

	def __getitem__(self, index):
		return take(self, index)

	def reshape(self, *shape):
		if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
			shape = tuple(shape[0])
		return reshape(self, shape)

	def sum(self, axis=None):
		return tensor_sum(self, axis)

	def mean(self, axis=None):
		n = self.size if axis is None else int(numpy.prod(
			[self.shape[a] for a in numpy.atleast_1d(axis)]))
		return tensor_sum(self, axis) * (1. / n)


def as_tensor(value, like=None):
	"""Wrap a value as a Tensor. Tensors are returned unchanged."""

	if isinstance(value, Tensor):
		return value

	dtype = like.dtype if like is not None and like.dtype != 'u8' else None
	return Tensor(value, dtype=dtype)

def _wrap(data, inputs, rule):
	"""Build the output tensor of an operation and record it if needed."""

	out = Tensor(data)
	tape = Tape.current()
	if tape is not None and any(t.requires_grad for t in inputs):
		for t in inputs:
			if t.dtype == 'u8':
				raise ContractError("u8 tensors cannot take part in a gradient tape.")
		tape.record(inputs, out, rule)
	return out

def custom_op(data, inputs, rule):
	"""Record an operation whose backward rule is written by hand. The rule
	maps the output cotangent to one cotangent per input."""

	return _wrap(data, tuple(inputs), rule)

def _is_scalar(value):
	return not isinstance(value, Tensor) and numpy.ndim(value) == 0

def _check_same_shape(a, b, name):
	if a.shape != b.shape:
		raise DimensionError("{}: shapes {} and {} do not agree".format(
			name, a.shape, b.shape))

def add(a, b):
	"""Elementwise sum of two equal-shape tensors, or a tensor and a scalar."""

	if _is_scalar(b):
		return _wrap(a.data + b, (a,), lambda g: (g,))
	if _is_scalar(a):
		return _wrap(b.data + a, (b,), lambda g: (g,))

	_check_same_shape(a, b, 'add')
	return _wrap(a.data + b.data, (a, b), lambda g: (g, g))

def neg(a):
	return _wrap(-a.data, (a,), lambda g: (-g,))

def mul(a, b):
	"""Elementwise product of two equal-shape tensors, or a tensor and a
	scalar."""

	if _is_scalar(b):
		return _wrap(a.data * b, (a,), lambda g: (g * b,))
	if _is_scalar(a):
		return _wrap(b.data * a, (b,), lambda g: (g * a,))

	_check_same_shape(a, b, 'mul')
	a_data, b_data = a.data, b.data
	return _wrap(a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))

def matmul(a, b):
	"""The matrix product of two 2-D tensors.

	Parameters
	----------
	a : Tensor, shape=(n, k)

	b : Tensor, shape=(k, m)

	Returns
	-------
	c : Tensor, shape=(n, m)
	"""

	if a.ndim != 2 or b.ndim != 2:
		raise DimensionError("matmul needs two 2-D tensors, got shapes {} and "
			"{}".format(a.shape, b.shape))
	if a.shape[1] != b.shape[0]:
		raise DimensionError("matmul: inner dimensions of {} and {} do not "
			"agree".format(a.shape, b.shape))

	a_data, b_data = a.data, b.data
	return _wrap(a_data @ b_data, (a, b),
		lambda g: (g @ b_data.T, a_data.T @ g))

def bias_add(x, bias):
	"""Add a bias vector along axis 1 of x, shape (N, F) or (N, C, H, W)."""

	if bias.ndim != 1 or x.ndim < 2 or x.shape[1] != bias.shape[0]:
		raise DimensionError("bias of shape {} cannot be added to a tensor of "
			"shape {}".format(bias.shape, x.shape))

	view = (1, -1) + (1,) * (x.ndim - 2)
	axes = (0,) + tuple(range(2, x.ndim))
	return _wrap(x.data + bias.data.reshape(view), (x, bias),
		lambda g: (g, g.sum(axis=axes)))

def conv2d_3x3(x, weight, bias=None):
	"""A 3x3 convolution with a zero padding of 1, so the output has the
	spatial size of the input.

	Parameters
	----------
	x : Tensor, shape=(C_in, H, W) or (N, C_in, H, W)
		The input image or batch of images.

	weight : Tensor, shape=(C_out, C_in, 3, 3)
		The kernels.

	bias : Tensor, shape=(C_out,), optional
		Added to every output pixel of the matching channel.

	Returns
	-------
	y : Tensor, shape=(C_out, H, W) or (N, C_out, H, W)
	"""

	squeeze = x.ndim == 3
	if squeeze:
		x = reshape(x, (1,) + x.shape)

	if x.ndim != 4:
		raise DimensionError("conv2d_3x3 needs a (C, H, W) or (N, C, H, W) "
			"input, got shape {}".format(x.shape))
	if weight.ndim != 4 or weight.shape[2:] != (3, 3):
		raise DimensionError("conv2d_3x3 needs a (C_out, C_in, 3, 3) weight, "
			"got shape {}".format(weight.shape))
	if weight.shape[1] != x.shape[1]:
		raise DimensionError("conv2d_3x3: weight expects {} input channels but "
			"the input has {}".format(weight.shape[1], x.shape[1]))
	if bias is not None and bias.shape != (weight.shape[0],):
		raise DimensionError("conv2d_3x3: bias of shape {} does not match {} "
			"output channels".format(bias.shape, weight.shape[0]))

	n_samples, n_channels, height, width = x.shape
	n_out = weight.shape[0]

	xp = numpy.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
	cols = numpy.empty((n_samples, n_channels * 9, height * width), dtype=xp.dtype)
	_im2col(xp, cols)
	w_flat = weight.data.reshape(n_out, n_channels * 9)

	y = numpy.matmul(w_flat, cols)
	if bias is not None:
		y += bias.data.reshape(1, n_out, 1)
	y = y.reshape(n_samples, n_out, height, width)

	def rule(g):
		g_flat = g.reshape(n_samples, n_out, height * width)
		grad_w = numpy.tensordot(g_flat, cols, axes=([0, 2], [0, 2]))
		grad_cols = numpy.ascontiguousarray(numpy.matmul(w_flat.T, g_flat))
		grad_xp = numpy.zeros(xp.shape, dtype=grad_cols.dtype)
		_col2im(grad_cols, grad_xp)
		grad_x = grad_xp[:, :, 1:-1, 1:-1]
		grads = [grad_x, grad_w.reshape(weight.shape)]
		if bias is not None:
			grads.append(g.sum(axis=(0, 2, 3)))
		return grads

	inputs = (x, weight) if bias is None else (x, weight, bias)
	out = _wrap(y, inputs, rule)

	if squeeze:
		out = reshape(out, out.shape[1:])
	return out

def softplus(x):
	"""Elementwise log(1 + exp(x)), returning x itself above 30."""

	data = x.data
	y = numpy.where(data > 30, data, numpy.log1p(numpy.exp(numpy.minimum(data, 30))))
	return _wrap(y, (x,), lambda g: (g * expit(data),))

def sigmoid(x):
	s = expit(x.data)
	return _wrap(s, (x,), lambda g: (g * s * (1. - s),))

def exp(x):
	y = numpy.exp(x.data)
	return _wrap(y, (x,), lambda g: (g * y,))

def log(x):
	data = x.data
	return _wrap(numpy.log(data), (x,), lambda g: (g / data,))

def concat(tensors, axis=0):
	"""Stack tensors along an existing axis.

	All shapes must agree except along axis. The backward rule splits the
	cotangent back into the pieces.
	"""

	tensors = list(tensors)
	if len(tensors) == 0:
		raise ContractError("concat needs at least one tensor.")

	ndim = tensors[0].ndim
	axis = axis % ndim if ndim > 0 else axis
	reference = tensors[0].shape

	for t in tensors[1:]:
		if t.ndim != ndim or any(t.shape[d] != reference[d] for d in range(ndim)
			if d != axis):
			raise DimensionError("concat: shape {} does not agree with {} off "
				"axis {}".format(t.shape, reference, axis))

	sizes = [t.shape[axis] for t in tensors]
	bounds = numpy.cumsum(sizes)[:-1]
	y = numpy.concatenate([t.data for t in tensors], axis=axis)
	return _wrap(y, tuple(tensors), lambda g: numpy.split(g, bounds, axis=axis))

def reshape(x, shape):
	original = x.shape
	try:
		y = x.data.reshape(shape)
	except ValueError:
		raise DimensionError("cannot reshape a tensor of shape {} into {}".format(
			original, tuple(shape)))

	return _wrap(y, (x,), lambda g: (g.reshape(original),))

def take(x, index):
	"""Basic (slice and integer) indexing. The backward rule scatters the
	cotangent into a zero tensor of the input shape."""

	original, dtype = x.shape, x.data.dtype

	def rule(g):
		grad = numpy.zeros(original, dtype=dtype)
		grad[index] = g
		return (grad,)

	return _wrap(numpy.array(x.data[index]), (x,), rule)

def tensor_sum(x, axis=None):
	"""Sum over all elements or over the given axes."""

	original = x.shape
	if axis is None:
		y = numpy.asarray(x.data.sum())
		return _wrap(y, (x,), lambda g: (numpy.full(original, g, dtype=x.data.dtype),))

	axes = tuple(a % x.ndim for a in numpy.atleast_1d(axis))
	y = x.data.sum(axis=axes)

	def rule(g):
		return (numpy.broadcast_to(numpy.expand_dims(g, axes), original).copy(),)

	return _wrap(y, (x,), rule)

def backward(loss):
	"""Run the backward sweep of the tape that recorded loss.

	Parameters
	----------
	loss : Tensor
		A scalar tensor.
	"""

	if not isinstance(loss, Tensor):
		raise ContractError("backward needs a Tensor.")
	if loss.size != 1:
		raise ContractError("backward needs a scalar loss, got shape "
			"{}".format(loss.shape))
	if loss._tape is None:
		raise ContractError("the loss was not recorded on a tape.")

	loss._tape.backward(loss)

def check_gradient(func, arrays, h=1e-4):
	"""Compare reverse-mode gradients with central finite differences.

	Parameters
	----------
	func : callable
		Takes as many Tensors as there are arrays and returns a scalar Tensor.

	arrays : list of numpy.ndarray
		The points at which to differentiate. They are not modified.

	h : float
		The finite difference step.

	Returns
	-------
	analytic : list of numpy.ndarray
		The gradients from the tape.

	numeric : list of numpy.ndarray
		The central finite difference estimates.
	"""

	arrays = [numpy.array(a, dtype='float64') for a in arrays]
	leaves = [Tensor(a, requires_grad=True) for a in arrays]

	with Tape() as tape:
		loss = func(*leaves)
	tape.backward(loss)
	analytic = [l.grad if l.grad is not None else numpy.zeros_like(l.data)
		for l in leaves]

	numeric = []
	for i, array in enumerate(arrays):
		estimate = numpy.zeros_like(array)
		flat = estimate.reshape(-1)
		for j in range(array.size):
			values = []
			for sign in (1., -1.):
				shifted = [a.copy() for a in arrays]
				shifted[i].reshape(-1)[j] += sign * h
				values.append(func(*[Tensor(a) for a in shifted]).item())
			flat[j] = (values[0] - values[1]) / (2 * h)
		numeric.append(estimate)

	return analytic, numeric

def encode_mrtf(array):
	"""Serialize an array to the MRTF binary container.

	The layout is the magic bytes "MRTF", a u8 version (1), a u8 dtype code
	(0=f32, 1=f64, 2=u8), a u8 rank, rank little-endian u64 extents, and the
	row-major little-endian payload.
	"""

	if isinstance(array, Tensor):
		array = array.data

	array = numpy.asarray(array)
	if array.dtype not in DTYPE_NAMES:
		raise ContractError("MRTF stores only f32, f64 and u8 arrays, got "
			"{}".format(array.dtype))
	if array.ndim > 255:
		raise DimensionError("MRTF stores at most 255 dimensions.")

	name = DTYPE_NAMES[array.dtype]
	header = MRTF_MAGIC + struct.pack('<BBB', MRTF_VERSION, MRTF_CODES[name],
		array.ndim)
	header += struct.pack('<{}Q'.format(array.ndim), *array.shape)
	payload = numpy.ascontiguousarray(array, dtype=array.dtype.newbyteorder('<'))
	return header + payload.tobytes()

def decode_mrtf(buffer, offset=0):
	"""Read one MRTF blob from a bytes buffer.

	Returns
	-------
	array : numpy.ndarray

	end : int
		The offset just past the blob, where the next one may start.
	"""

	buffer = memoryview(buffer)
	if bytes(buffer[offset:offset + 4]) != MRTF_MAGIC:
		raise FormatError("missing MRTF magic bytes", offset)
	if len(buffer) < offset + 7:
		raise FormatError("truncated MRTF header", len(buffer))

	version, code, rank = struct.unpack_from('<BBB', buffer, offset + 4)
	if version != MRTF_VERSION:
		raise FormatError("unsupported MRTF version {}".format(version), offset + 4)
	if code not in MRTF_DTYPES:
		raise FormatError("unknown MRTF dtype code {}".format(code), offset + 5)

	start = offset + 7
	if len(buffer) < start + 8 * rank:
		raise FormatError("truncated MRTF extents", len(buffer))
	shape = struct.unpack_from('<{}Q'.format(rank), buffer, start)

	dtype = DTYPES[MRTF_DTYPES[code]]
	start += 8 * rank
	n_bytes = int(numpy.prod(shape, dtype='int64')) * dtype.itemsize
	if len(buffer) < start + n_bytes:
		raise FormatError("truncated MRTF payload, expected {} bytes".format(
			n_bytes), len(buffer))

	array = numpy.frombuffer(buffer[start:start + n_bytes],
		dtype=dtype.newbyteorder('<')).astype(dtype).reshape(shape)
	return array, start + n_bytes

def save_tensor(path, tensor):
	with open(path, 'wb') as outfile:
		outfile.write(encode_mrtf(tensor))

def load_tensor(path):
	with open(path, 'rb') as infile:
		buffer = infile.read()

	array, end = decode_mrtf(buffer)
	if end != len(buffer):
		raise FormatError("trailing bytes after MRTF payload", end)
	return Tensor(array)
