# cnf.py

"""
This code implements one conditional continuous normalizing flow: the
convolutional dynamics network, the estimation of the divergence of the
dynamics, and the change of variables accounting along an integration.

The trace of the Jacobian of the dynamics is computed from Jacobian-vector
products that the network propagates alongside its forward pass. Those
products are built from ordinary first-order tape operations, so the
parameter gradient of a trace estimate takes a single backward sweep.
"""

import math

import numpy

from .base import Module
from .utils import check_random_state
from .tensor import Tensor
from .tensor import concat
from .tensor import reshape
from .tensor import sigmoid
from .tensor import softplus
from .tensor import conv2d_3x3
from .tensor import tensor_sum
from .tensor import DTYPES
from .odeint import integrate
from .odeint import AugmentedState
from .odeint import IntegrationSpec
from .errors import ContractError
from .errors import DimensionError

N_LAYERS = 4


def _sum_per_sample(x):
	n = x.shape[0]
	return tensor_sum(reshape(x, (n, x.size // n)), axis=1)

def gaussian_logp(z, variance, batch=False):
	"""The log-density of z under an isotropic zero-mean Gaussian.

	Parameters
	----------
	z : Tensor or numpy.ndarray
		The point to evaluate.

	variance : float
		The variance of every coordinate, > 0.

	batch : bool
		If True axis 0 of z is a batch axis and one value per sample is
		returned, otherwise the sum over all elements.

	Returns
	-------
	logp : Tensor
	"""

	if not variance > 0:
		raise ContractError("variance must be positive, got {}".format(variance))

	z = z if isinstance(z, Tensor) else Tensor(z)
	const = -0.5 * math.log(2 * math.pi * variance)

	if batch:
		dims = z.size // z.shape[0]
		squares = _sum_per_sample(z * z)
	else:
		dims = z.size
		squares = tensor_sum(z * z)

	return squares * (-0.5 / variance) + dims * const


class DynamicsNet(Module):
	"""The dynamics f(v, t | cond) of one flow.

	Each of the `blocks` pieces is a 4-layer deep convolutional network of
	3x3 kernels with softplus activations between the layers. Its input is
	the state, the conditioning image when there is one, and a constant
	plane holding the time, concatenated on the channel axis.

	Parameters
	----------
	state_shape : tuple
		(C, H, W) of the state.

	cond_channels : int
		The number of channels of the conditioning image, 0 for none.

	hidden : int
		The number of hidden channels.

	blocks : int
		The number of pieces, each integrated over [t0, t1] in turn.

	dtype : str
		'f64' or 'f32'.

	random_state : None, int or numpy.random.Generator
		The seed of the initial weights.

	zero_last : bool
		Whether to start the last layer of every piece at zero so that the
		initial flow is the identity.
	"""

	def __init__(self, state_shape, cond_channels=0, hidden=64, blocks=1,
		dtype='f64', random_state=None, zero_last=True):
		super(DynamicsNet, self).__init__()

		if len(state_shape) != 3:
			raise DimensionError("state_shape must be (C, H, W), got {}".format(
				state_shape))
		if int(hidden) != hidden or hidden < 1:
			raise ContractError("hidden must be a positive integer.")
		if int(blocks) != blocks or blocks < 1:
			raise ContractError("blocks must be a positive integer.")
		if dtype not in ('f32', 'f64'):
			raise ContractError("dtype must be 'f32' or 'f64'.")

		self.state_shape = tuple(int(d) for d in state_shape)
		self.cond_channels = int(cond_channels)
		self.hidden = int(hidden)
		self.blocks = int(blocks)
		self.dtype = dtype

		rng = check_random_state(random_state)
		n_state = self.state_shape[0]
		channels = [n_state + self.cond_channels + 1] + [self.hidden] * 3 + [n_state]

		for piece in range(self.blocks):
			for i in range(N_LAYERS):
				bound = 1. / math.sqrt(channels[i] * 9)
				weight = rng.uniform(-bound, bound, (channels[i + 1], channels[i], 3, 3))
				bias = rng.uniform(-bound, bound, channels[i + 1])

				if zero_last and i == N_LAYERS - 1:
					weight, bias = numpy.zeros_like(weight), numpy.zeros_like(bias)

				self.add_parameter(self._name(piece, i, 'weight'),
					weight.astype(DTYPES[dtype]))
				self.add_parameter(self._name(piece, i, 'bias'),
					bias.astype(DTYPES[dtype]))

	@staticmethod
	def _name(piece, layer, kind):
		return 'piece{}.conv{}.{}'.format(piece, layer, kind)

	def layer(self, piece, i):
		return (self._parameters[self._name(piece, i, 'weight')],
			self._parameters[self._name(piece, i, 'bias')])

	def forward(self, piece, v, t, cond=None):
		"""Evaluate f(v, t | cond).

		Returns
		-------
		f : Tensor
			The derivative, with the shape of v.

		slopes : list of Tensor
			The softplus derivatives of the hidden layers, needed by jvp.
		"""

		n, _, height, width = v.shape
		plane = Tensor(numpy.full((n, 1, height, width), t, dtype=v.data.dtype))
		h = concat([v, plane] if cond is None else [v, cond, plane], axis=1)

		slopes = []
		for i in range(N_LAYERS):
			weight, bias = self.layer(piece, i)
			pre = conv2d_3x3(h, weight, bias)

			if i < N_LAYERS - 1:
				slopes.append(sigmoid(pre))
				h = softplus(pre)
			else:
				h = pre

		return h, slopes

	def jvp(self, piece, slopes, tangent):
		"""The product of the Jacobian df/dv at the point of `slopes` with a
		tangent of the shape of v."""

		weight, _ = self.layer(piece, 0)
		h = conv2d_3x3(tangent, weight[:, :self.state_shape[0]])

		for i in range(1, N_LAYERS):
			h = slopes[i - 1] * h
			h = conv2d_3x3(h, self.layer(piece, i)[0])

		return h

	def jacobian(self, piece, v, t, cond=None):
		"""The dense Jacobian df/dv of every sample.

		Returns
		-------
		jacobian : numpy.ndarray, shape=(N, D, D)
			With D the number of elements of one state.
		"""

		v = v if isinstance(v, Tensor) else Tensor(v)
		_, slopes = self.forward(piece, v, t, cond)

		n = v.shape[0]
		dims = v.size // n
		jacobian = numpy.empty((n, dims, dims), dtype=v.data.dtype)

		for i in range(dims):
			basis = numpy.zeros((n, dims), dtype=v.data.dtype)
			basis[:, i] = 1.
			column = self.jvp(piece, slopes, Tensor(basis.reshape(v.shape)))
			jacobian[:, :, i] = column.data.reshape(n, dims)

		return jacobian


class TraceEstimator(object):
	"""How the divergence Tr(df/dv) is computed.

	Parameters
	----------
	mode : str
		'exact' sums the Jacobian diagonal from one Jacobian-vector product
		per state dimension. 'hutchinson' averages eps^T J eps over `samples`
		noise vectors. 'auto' is exact when a state has at most
		`exact_max_dims` elements and hutchinson otherwise.

	noise : str
		'gaussian' or 'rademacher', the distribution of eps.

	samples : int
		The number of noise vectors n_eps.

	exact_max_dims : int
		The largest state size handled exactly in 'auto' mode.
	"""

	def __init__(self, mode='hutchinson', noise='gaussian', samples=1,
		exact_max_dims=64):
		if mode not in ('exact', 'hutchinson', 'auto'):
			raise ContractError("mode must be 'exact', 'hutchinson' or 'auto'.")
		if noise not in ('gaussian', 'rademacher'):
			raise ContractError("noise must be 'gaussian' or 'rademacher'.")
		if int(samples) != samples or samples < 1:
			raise ContractError("samples must be a positive integer.")

		self.mode = mode
		self.noise = noise
		self.samples = int(samples)
		self.exact_max_dims = int(exact_max_dims)

	def __repr__(self):
		return "TraceEstimator(mode={!r}, noise={!r}, samples={})".format(
			self.mode, self.noise, self.samples)

	def resolve(self, dims):
		if self.mode == 'auto':
			return 'exact' if dims <= self.exact_max_dims else 'hutchinson'
		return self.mode

	def draw(self, shape, rng, dtype='float64'):
		"""Noise of shape (samples,) + shape, held fixed for one integration."""

		rng = check_random_state(rng)
		shape = (self.samples,) + tuple(shape)

		if self.noise == 'gaussian':
			return rng.standard_normal(shape).astype(dtype)
		return (rng.integers(0, 2, shape) * 2 - 1).astype(dtype)

	def evaluate(self, net, piece, v, t, cond, noise=None, mode=None):
		"""Evaluate the dynamics together with the trace and regularizer
		integrands.

		Returns
		-------
		f : Tensor

		trace : Tensor, shape=(N,)
			Exact or estimated Tr(df/dv).

		ke : Tensor, shape=(N,)
			||f||^2.

		jn : Tensor, shape=(N,)
			||J||_F^2 when exact, otherwise the estimate ||J eps||^2.
		"""

		mode = mode or self.resolve(v.size // v.shape[0])
		f, slopes = net.forward(piece, v, t, cond)

		n = v.shape[0]
		dims = v.size // n
		ke = _sum_per_sample(f * f)

		trace, jn = None, None
		if mode == 'exact':
			for i in range(dims):
				basis = numpy.zeros((n, dims), dtype=v.data.dtype)
				basis[:, i] = 1.

				column = reshape(net.jvp(piece, slopes, Tensor(basis.reshape(v.shape))),
					(n, dims))
				diagonal = column[:, i]
				squares = tensor_sum(column * column, axis=1)

				trace = diagonal if trace is None else trace + diagonal
				jn = squares if jn is None else jn + squares
		else:
			if noise is None:
				raise ContractError("hutchinson mode needs a noise tensor.")

			for k in range(noise.shape[0]):
				eps = Tensor(noise[k])
				product = net.jvp(piece, slopes, eps)
				estimate = _sum_per_sample(eps * product)
				squares = _sum_per_sample(product * product)

				trace = estimate if trace is None else trace + estimate
				jn = squares if jn is None else jn + squares

			if noise.shape[0] > 1:
				trace = trace * (1. / noise.shape[0])
				jn = jn * (1. / noise.shape[0])

		return f, trace, ke, jn


class CnfBlock(Module):
	"""One conditional continuous normalizing flow g_s.

	A block maps its input to a latent by integrating the dynamics network
	forward in time, piece after piece, and maps a latent back by
	integrating in reverse. Blocks of every level but the coarsest are
	conditioned on the coarser image, which has the spatial size of the
	state.

	Parameters
	----------
	state_shape : tuple
		(C, H, W) of the input and latent.

	cond_shape : tuple or None
		(C_cond, H, W) of the conditioning image, None for an unconditional
		block.

	hidden, blocks, dtype, zero_last : see DynamicsNet

	spec : IntegrationSpec or None
		The default integration, fixed-step rk4 with 8 steps.

	trace : TraceEstimator or None
		The default divergence estimator, hutchinson with one gaussian
		sample.

	random_state : None, int or numpy.random.Generator
		The seed of the initial weights.
	"""

	def __init__(self, state_shape, cond_shape=None, hidden=64, blocks=1,
		spec=None, trace=None, dtype='f64', random_state=None, zero_last=True):
		super(CnfBlock, self).__init__()

		state_shape = tuple(int(d) for d in state_shape)
		if cond_shape is not None:
			cond_shape = tuple(int(d) for d in cond_shape)
			if len(cond_shape) != 3 or cond_shape[1:] != state_shape[1:]:
				raise DimensionError("conditioning shape {} must share the spatial "
					"size of the state {}".format(cond_shape, state_shape))

		self.state_shape = state_shape
		self.cond_shape = cond_shape
		self.dtype = dtype
		self.spec = spec if spec is not None else IntegrationSpec()
		self.trace = trace if trace is not None else TraceEstimator()
		self.net = self.add_module('net', DynamicsNet(state_shape,
			0 if cond_shape is None else cond_shape[0], hidden, blocks, dtype,
			random_state, zero_last))

	@property
	def conditional(self):
		return self.cond_shape is not None

	@property
	def dims(self):
		return int(numpy.prod(self.state_shape))

	def _prepare(self, x, cond):
		x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
		squeeze = x.ndim == 3
		if squeeze:
			x = reshape(x, (1,) + x.shape)

		if x.shape[1:] != self.state_shape:
			raise DimensionError("input of shape {} does not match the block state "
				"shape {}".format(x.shape[1:], self.state_shape))

		if self.conditional and cond is None:
			raise ContractError("this block is conditional and needs the coarser "
				"image of shape {}".format(self.cond_shape))
		if not self.conditional and cond is not None:
			raise ContractError("this block is unconditional; no conditioning "
				"image may be given.")

		if cond is not None:
			cond = cond if isinstance(cond, Tensor) else Tensor(cond, dtype=self.dtype)
			if cond.ndim == 3:
				cond = reshape(cond, (1,) + cond.shape)
			if cond.shape != (x.shape[0],) + self.cond_shape:
				raise DimensionError("conditioning image of shape {} does not match "
					"{}".format(cond.shape[1:], self.cond_shape))

		return x, cond, squeeze

	def dynamics(self, piece, cond=None, trace=None, mode=None, noise=None):
		"""The callable integrated for one piece: (v, t) -> (f, trace, ke,
		jn)."""

		estimator = trace if trace is not None else self.trace

		def func(v, t):
			return estimator.evaluate(self.net, piece, v, t, cond, noise, mode)

		return func

	def _flow(self, piece, cond):
		def func(v, t):
			f, _ = self.net.forward(piece, v, t, cond)
			return f, 0., 0., 0.

		return func

	def forward_logp(self, x, cond=None, rng=None, spec=None, trace=None):
		"""Map an input to its latent and account for the change in density.

		Parameters
		----------
		x : Tensor or numpy.ndarray, shape=(N,) + state_shape or state_shape

		cond : Tensor or numpy.ndarray or None
			The coarser image, required exactly when the block is conditional.

		rng : None, int or numpy.random.Generator
			The source of the hutchinson noise, drawn once per piece.

		spec : IntegrationSpec or None
			Overrides the block's integration.

		trace : TraceEstimator or None
			Overrides the block's divergence estimator.

		Returns
		-------
		z : Tensor
			The latent.

		delta_logp : Tensor, shape=(N,)
			The change of variables term int Tr(df/dv) dt = log|det dz/dx|,
			so that log p(x) = delta_logp + log p(z).

		ke, jn : Tensor, shape=(N,)
			The kinetic energy and Jacobian norm integrals.
		"""

		x, cond, squeeze = self._prepare(x, cond)
		spec = spec if spec is not None else self.spec
		estimator = trace if trace is not None else self.trace
		mode = estimator.resolve(self.dims)
		rng = check_random_state(rng)

		state = AugmentedState.initial(x)
		for piece in range(self.net.blocks):
			noise = None
			if mode == 'hutchinson':
				noise = estimator.draw(x.shape, rng, x.data.dtype)

			func = self.dynamics(piece, cond, estimator, mode, noise)
			state = integrate(func, state, spec, 'forward')

		z, delta = state.v, -state.dlogp
		ke, jn = state.ke, state.jn

		if squeeze:
			z = reshape(z, z.shape[1:])
			delta, ke, jn = reshape(delta, ()), reshape(ke, ()), reshape(jn, ())

		return z, delta, ke, jn

	def inverse(self, z, cond=None, spec=None):
		"""Map a latent back to an input by integrating in reverse."""

		z, cond, squeeze = self._prepare(z, cond)
		spec = spec if spec is not None else self.spec

		state = AugmentedState.initial(z)
		for piece in reversed(range(self.net.blocks)):
			state = integrate(self._flow(piece, cond), state, spec, 'reverse')

		x = state.v
		if squeeze:
			x = reshape(x, x.shape[1:])
		return x
