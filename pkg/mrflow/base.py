# base.py

"""
This file contains the base classes shared by the flows: a container of
named parameters, and the estimator skeleton with the fit / transform
methods that every density model follows.
"""

from collections import OrderedDict

import numpy

from .tensor import Tensor
from .errors import ContractError
from .errors import DimensionError


class Module(object):
	"""A container of named parameter tensors.

	Subclasses register their parameters with add_parameter and may nest
	other modules with add_module, whose parameters are then reported under
	a dotted prefix.
	"""

	def __init__(self):
		self._parameters = OrderedDict()
		self._modules = OrderedDict()

	def add_parameter(self, name, array):
		tensor = Tensor(array, requires_grad=True)
		self._parameters[name] = tensor
		return tensor

	def add_module(self, name, module):
		self._modules[name] = module
		return module

	def named_parameters(self, prefix=''):
		"""(name, Tensor) pairs in registration order."""

		for name, tensor in self._parameters.items():
			yield prefix + name, tensor

		for name, module in self._modules.items():
			for item in module.named_parameters(prefix + name + '.'):
				yield item

	def parameters(self):
		return [tensor for _, tensor in self.named_parameters()]

	def n_parameters(self):
		return int(sum(t.size for t in self.parameters()))

	def zero_grad(self):
		for tensor in self.parameters():
			tensor.grad = None

	def state_dict(self):
		"""Copies of the parameter values keyed by name."""

		return OrderedDict((name, t.data.copy()) for name, t in self.named_parameters())

	def load_state_dict(self, state):
		"""Overwrite the parameter values in place.

		Parameters
		----------
		state : dict
			Must hold every parameter name with the matching shape.
		"""

		for name, tensor in self.named_parameters():
			if name not in state:
				raise ContractError("missing parameter {!r}".format(name))

			value = numpy.asarray(state[name])
			if value.shape != tensor.shape:
				raise DimensionError("parameter {!r} has shape {} but the stored "
					"value has shape {}".format(name, tensor.shape, value.shape))

			tensor.data[...] = value


class BaseFlow(object):
	"""The base density model object.

	This object defines the structure that the flows follow: a `fit` method
	that trains the model on a data set of 8-bit images, a `transform` method
	that maps images onto their latent representation, `fit_transform` doing
	both, and `score_samples` returning the log-likelihood of each image.

	Parameters
	----------
	verbose : bool
		Whether to show progress bars while training and evaluating.

	Attributes
	----------
	image_shape : tuple
		The (C, H, W) shape of the images the model is defined on.
	"""

	def __init__(self, verbose=False):
		if verbose not in (True, False):
			raise ContractError("verbosity must be True or False")

		self.verbose = verbose
		self.image_shape = None

	def _check_images(self, X, dtype=None):
		"""Validate a batch of images and return it as a numpy array."""

		if isinstance(X, Tensor):
			X = X.data

		if not isinstance(X, (list, numpy.ndarray)):
			raise ContractError("X must be a list of images or a numpy array.")

		X = numpy.asarray(X) if dtype is None else numpy.asarray(X, dtype=dtype)
		if X.ndim == 3:
			X = X[None]
		if X.ndim != 4:
			raise DimensionError("X must have shape (N, C, H, W), got {}".format(
				X.shape))
		if self.image_shape is not None and X.shape[1:] != tuple(self.image_shape):
			raise DimensionError("images of shape {} do not match the model "
				"shape {}".format(X.shape[1:], tuple(self.image_shape)))

		return X

	def fit(self, X, y=None):
		"""Train the model on a data set of 8-bit images.

		Parameters
		----------
		X : numpy.ndarray, shape=(n, C, H, W), dtype=uint8
			The training images.

		y : None
			Ignored, present for API consistency.

		Returns
		-------
		self : BaseFlow
		"""

		X = self._check_images(X)
		if X.dtype != numpy.uint8:
			raise ContractError("X must hold 8-bit images (dtype uint8).")

		self._fit(X)
		return self

	def _fit(self, X):
		raise NotImplementedError

	def transform(self, X, y=None):
		raise NotImplementedError

	def score_samples(self, X):
		raise NotImplementedError

	def fit_transform(self, X, y=None):
		"""Train the model and return the latents of the training images."""

		return self.fit(X, y).transform(X)
