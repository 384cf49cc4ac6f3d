# utils.py

"""
This code contains utility functions to support the main functionality of
the code: seeded random number generation, thread limits, and the first
order optimizer used to train each level.
"""

import os
import numbers
import logging

import numpy

from .errors import ContractError

logger = logging.getLogger(__name__)

def check_random_state(seed):
	"""Turn a seed into a numpy Generator.

	Every stochastic operation in mrflow takes an explicit generator handle.
	This converts the loose forms a user may pass into one.

	Parameters
	----------
	seed : None, int or numpy.random.Generator
		None gives a generator seeded with 0 so that results stay
		reproducible, an int seeds a new PCG64 generator, and a Generator is
		passed through unchanged.

	Returns
	-------
	rng : numpy.random.Generator
	"""

	if seed is None:
		return numpy.random.Generator(numpy.random.PCG64(0))
	if isinstance(seed, numpy.random.Generator):
		return seed
	if isinstance(seed, numbers.Integral):
		return numpy.random.Generator(numpy.random.PCG64(int(seed)))

	raise ContractError("seed must be None, an int or a numpy Generator, "
		"got {}".format(type(seed).__name__))

def make_rng(seed, *keys):
	"""Derive an independent generator from a seed and a sequence of keys.

	The same (seed, keys) always gives the same stream, and different keys
	give statistically independent streams. Training of level s in epoch e
	uses make_rng(seed, s, e).
	"""

	entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
	return numpy.random.Generator(numpy.random.PCG64(
		numpy.random.SeedSequence(entropy)))

def level_rngs(seed, levels):
	"""One generator per level, in level order 1..levels.

	Parameters
	----------
	seed : None, int or numpy.random.Generator
		When a Generator is given one integer is drawn from it to seed the
		per-level streams.

	levels : int
		The number of levels.

	Returns
	-------
	rngs : list of numpy.random.Generator
	"""

	if isinstance(seed, numpy.random.Generator):
		seed = int(seed.integers(0, 2 ** 63 - 1))
	elif seed is None:
		seed = 0

	return [make_rng(seed, level) for level in range(1, levels + 1)]

def n_threads(default=None):
	"""The number of worker threads to use, capped by MRFLOW_THREADS."""

	if default is None:
		default = os.cpu_count() or 1

	value = os.environ.get('MRFLOW_THREADS')
	if value is None or value.strip() == '':
		return max(1, default)

	try:
		cap = int(value)
	except ValueError:
		raise ContractError("MRFLOW_THREADS must be a positive integer, "
			"got {!r}".format(value))

	if cap < 1:
		raise ContractError("MRFLOW_THREADS must be a positive integer, "
			"got {!r}".format(value))

	return max(1, min(default, cap))

def clip_grad_norm(parameters, max_norm):
	"""Scale the gradients of the parameters to a global norm of at most
	max_norm.

	Parameters
	----------
	parameters : list of Tensor
		Tensors whose grad field is clipped in place. Tensors without a
		gradient are skipped.

	max_norm : float
		The largest global L2 norm allowed.

	Returns
	-------
	norm : float
		The global norm before clipping.
	"""

	if max_norm <= 0:
		raise ContractError("max_norm must be positive.")

	grads = [p.grad for p in parameters if p.grad is not None]
	norm = float(numpy.sqrt(sum(float((g * g).sum()) for g in grads)))

	if norm > max_norm:
		scale = max_norm / norm
		for p in parameters:
			if p.grad is not None:
				p.grad = p.grad * scale

	return norm

class Adam(object):
	"""Adaptive moment estimation over a named set of parameters.

	The update is the usual bias-corrected one. With lr equal to zero the
	parameters are left bitwise unchanged.

	Parameters
	----------
	parameters : dict
		A mapping from names to Tensors that require gradients.

	lr : float
		The learning rate.

	betas : tuple of float
		Decay rates of the first and second moment estimates.

	eps : float
		Added to the denominator.

	Attributes
	----------
	m, v : dict
		First and second moment estimates keyed by parameter name.

	t : int
		The number of updates taken so far.
	"""

	def __init__(self, parameters, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
		if lr < 0:
			raise ContractError("lr must be non-negative.")

		self.parameters = parameters
		self.lr = lr
		self.betas = betas
		self.eps = eps
		self.t = 0
		self.m = {name: numpy.zeros_like(p.data) for name, p in parameters.items()}
		self.v = {name: numpy.zeros_like(p.data) for name, p in parameters.items()}

	def zero_grad(self):
		for p in self.parameters.values():
			p.grad = None

	def step(self):
		"""Apply one update using the gradients currently held."""

		self.t += 1
		beta1, beta2 = self.betas
		correction1 = 1. - beta1 ** self.t
		correction2 = 1. - beta2 ** self.t

		for name, p in self.parameters.items():
			if p.grad is None:
				continue

			g = p.grad
			self.m[name] = beta1 * self.m[name] + (1. - beta1) * g
			self.v[name] = beta2 * self.v[name] + (1. - beta2) * g * g

			m_hat = self.m[name] / correction1
			v_hat = self.v[name] / correction2
			p.data -= self.lr * m_hat / (numpy.sqrt(v_hat) + self.eps)

	def state_dict(self):
		state = {'t': self.t, 'lr': self.lr}
		for name in self.parameters:
			state['adam.m.' + name] = self.m[name]
			state['adam.v.' + name] = self.v[name]
		return state

	def load_state_dict(self, state):
		self.t = int(state['t'])
		self.lr = float(state['lr'])
		for name in self.parameters:
			self.m[name] = numpy.array(state['adam.m.' + name])
			self.v[name] = numpy.array(state['adam.v.' + name])

class PlateauScheduler(object):
	"""Halve the learning rate of an optimizer when the monitored loss has
	not improved for `patience` epochs.
	"""

	def __init__(self, optimizer, patience=2, factor=0.5):
		if patience < 1:
			raise ContractError("patience must be a positive integer.")

		self.optimizer = optimizer
		self.patience = patience
		self.factor = factor
		self.best = numpy.inf
		self.bad_epochs = 0

	def step(self, loss):
		if loss < self.best:
			self.best = loss
			self.bad_epochs = 0
			return

		self.bad_epochs += 1
		if self.bad_epochs >= self.patience:
			self.optimizer.lr *= self.factor
			self.bad_epochs = 0
			logger.info("loss plateaued at %.6f, learning rate lowered to %g",
				self.best, self.optimizer.lr)
