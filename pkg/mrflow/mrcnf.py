# mrcnf.py

"""
This code implements the multi-resolution model: a stack of S conditional
continuous normalizing flows chained across resolutions.

An image x_1 is decomposed into details y_1 ... y_{S-1} and a coarse image
x_S. Block s < S maps y_s to a latent z_s conditioned on the ground-truth
coarser image x_{s+1}, and block S maps x_S unconditionally. The
log-likelihood of x_1 is the sum over levels of the change of variables
term and the Gaussian prior of z_s, plus the log-determinant of the
decomposition. Since the levels only share data, each one is trained on
its own term of the sum, independently and possibly in parallel.

Generation runs the other way: latents are drawn coarsest first, and each
level is conditioned on the coarse image just generated.
"""

import os
import math
import logging

from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

import numpy

from tqdm import tqdm

from .base import BaseFlow
from .cnf import CnfBlock
from .cnf import TraceEstimator
from .cnf import gaussian_logp
from .utils import Adam
from .utils import PlateauScheduler
from .utils import check_random_state
from .utils import clip_grad_norm
from .utils import level_rngs
from .utils import make_rng
from .utils import n_threads
from .tensor import Tape
from .tensor import DTYPES
from .tensor import encode_mrtf
from .tensor import decode_mrtf
from .odeint import IntegrationSpec
from .dataio import dequantize
from .multires import NoiseSchedule
from .multires import TransformMatrix
from .multires import patch_split
from .multires import patch_merge
from .errors import ContractError
from .errors import DimensionError
from .errors import DivergenceError
from .errors import FormatError
from .errors import TrainingDivergedError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG2 = math.log(2.)


class SampleSpec(object):
	"""How many samples to draw, at what temperature, from which seed.

	The temperature scales the standard deviation of the latent noise.
	"""

	def __init__(self, count=1, temperature=1., seed=0):
		if int(count) != count or count < 1:
			raise ContractError("count must be a positive integer.")
		if not temperature > 0:
			raise ContractError("temperature must be positive, got {}".format(
				temperature))

		self.count = int(count)
		self.temperature = float(temperature)
		self.seed = seed


class TrainingLog(object):
	"""The per-epoch series of one level's training.

	Parameters
	----------
	level : int
		The level that was trained.

	rows : array-like or None
		Existing rows of (epoch, loss, bpd_contrib, ke, jn, grad_norm).
	"""

	COLUMNS = ('epoch', 'loss', 'bpd_contrib', 'ke', 'jn', 'grad_norm')

	def __init__(self, level, rows=None):
		self.level = level
		self.rows = [] if rows is None else [tuple(float(v) for v in row)
			for row in numpy.asarray(rows, dtype='float64').reshape(-1, 6)]

	def __len__(self):
		return len(self.rows)

	def __getitem__(self, column):
		return numpy.array([row[self.COLUMNS.index(column)] for row in self.rows])

	def append(self, epoch, loss, bpd_contrib, ke, jn, grad_norm):
		self.rows.append((float(epoch), float(loss), float(bpd_contrib), float(ke),
			float(jn), float(grad_norm)))

	def to_array(self):
		return numpy.array(self.rows, dtype='float64').reshape(-1, 6)

	def csv_rows(self):
		"""(level, epoch, loss, bpd_contrib, ke, jn, grad_norm) string rows."""

		for row in self.rows:
			yield [str(self.level), str(int(row[0]))] + [repr(v) for v in row[1:]]


class MrcnfModel(BaseFlow):
	"""A multi-resolution continuous normalizing flow.

	This is the model object. It holds one CnfBlock per level, the transform
	that moves between resolutions and the variances of the priors. Levels
	are numbered 1 (finest) to S (coarsest).

	Parameters
	----------
	levels : int
		S, the number of resolutions.

	channels : int
		C, the number of image channels.

	resolution : int or tuple
		The finest H = W, or (H, W). Both must be divisible by 2^(S-1).

	transform : str
		'unimodular' or 'haar'.

	noise_schedule : bool
		Whether the priors use the multi-resolution variances or unit
		variance everywhere.

	hidden : int
		The hidden channels of every dynamics network.

	blocks : int
		The number of pieces of every dynamics network.

	train_spec, eval_spec : IntegrationSpec or None
		The integration used while training (default rk4 with 8 steps) and
		while evaluating (default adaptive with rtol = atol = 1e-5).

	train_trace, eval_trace : TraceEstimator or None
		The divergence estimators used while training (default hutchinson
		with one gaussian sample) and while evaluating (default 'auto').

	lr : float
		The initial learning rate of every level.

	lambda_k, lambda_j : float
		The weights of the kinetic energy and Jacobian norm regularizers.

	grad_clip : float
		The largest global gradient norm of an update.

	patience : int
		Epochs without improvement before the learning rate is halved.

	epochs, batch : int
		The training length and batch size used by fit.

	seed : int
		The seed every random stream of the model is derived from.

	dtype : str
		'f64' or 'f32'.

	finest_offset : int
		The number of finer levels this model has been grown by.

	n_jobs : int
		The number of levels trained at once by fit.

	verbose : bool
		Whether to show progress bars.

	Attributes
	----------
	blocks : list of CnfBlock
		blocks[s - 1] is the flow of level s.

	frozen : list of bool
		Whether each level is excluded from training.

	schedule : NoiseSchedule
		The prior variances.

	logs : dict
		The TrainingLog of every level trained so far.
	"""

	def __init__(self, levels=2, channels=1, resolution=8, transform='unimodular',
		noise_schedule=True, hidden=64, blocks=2, train_spec=None, eval_spec=None,
		train_trace=None, eval_trace=None, lr=1e-3, lambda_k=0.01,
		lambda_j=0.01, grad_clip=100., patience=2, epochs=10, batch=64, seed=0,
		dtype='f64', finest_offset=0, n_jobs=1, verbose=False):
		super(MrcnfModel, self).__init__(verbose)

		if int(levels) != levels or levels < 1:
			raise ContractError("levels must be a positive integer.")
		if int(channels) != channels or channels < 1:
			raise ContractError("channels must be a positive integer.")
		if dtype not in ('f32', 'f64'):
			raise ContractError("dtype must be 'f32' or 'f64'.")
		if lr < 0:
			raise ContractError("lr must be non-negative.")
		if lambda_k < 0 or lambda_j < 0:
			raise ContractError("regularizer weights must be non-negative.")
		if int(n_jobs) != n_jobs or n_jobs < 1:
			raise ContractError("n_jobs must be a positive integer.")

		height, width = (resolution, resolution) if numpy.ndim(resolution) == 0 \
			else tuple(resolution)
		factor = 2 ** (levels - 1)
		if height % factor != 0 or width % factor != 0:
			raise DimensionError("a {}x{} image cannot be split into {} levels; H and "
				"W must be divisible by {}".format(height, width, levels, factor))

		self.levels = int(levels)
		self.channels = int(channels)
		self.height, self.width = int(height), int(width)
		self.image_shape = (self.channels, self.height, self.width)
		self.kind = transform
		self.matrix = TransformMatrix(transform)
		self.noise_schedule = bool(noise_schedule)
		self.finest_offset = int(finest_offset)
		self.schedule = NoiseSchedule(levels, noise_schedule, transform, finest_offset)
		self.hidden = hidden
		self.n_blocks = blocks
		self.train_spec = train_spec if train_spec is not None else IntegrationSpec()
		self.eval_spec = eval_spec if eval_spec is not None else IntegrationSpec(
			'adaptive_rk45')
		self.train_trace = train_trace if train_trace is not None else TraceEstimator()
		self.eval_trace = eval_trace if eval_trace is not None else TraceEstimator('auto')
		self.lr = lr
		self.lambda_k = lambda_k
		self.lambda_j = lambda_j
		self.grad_clip = grad_clip
		self.patience = patience
		self.epochs = epochs
		self.batch = batch
		self.seed = seed
		self.dtype = dtype
		self.n_jobs = int(n_jobs)

		self.blocks = []
		for s in range(1, self.levels + 1):
			cond = self.level_shape(s + 1) if s < self.levels else None
			self.blocks.append(CnfBlock(self.state_shape(s), cond, hidden, blocks,
				self.train_spec, self.train_trace, dtype, make_rng(seed, s, 0)))

		self.frozen = [False] * self.levels
		self.logs = {}
		self._training = {}

	@property
	def dims(self):
		return self.channels * self.height * self.width

	def level_shape(self, level):
		"""The (C, H_s, W_s) shape of the image x_s."""

		factor = 2 ** (level - 1)
		return (self.channels, self.height // factor, self.width // factor)

	def state_shape(self, level):
		"""The shape of the input of block s: y_s for s < S and x_S for s = S."""

		if level < self.levels:
			return (3 * self.channels,) + self.level_shape(level + 1)[1:]
		return self.level_shape(level)

	def level_logdet(self, level):
		"""The log-determinant of the split at level s, per image."""

		if level == self.levels:
			return 0.
		return int(numpy.prod(self.level_shape(level + 1))) * \
			self.matrix.log_abs_det_inverse

	def prior_variance(self, level):
		return self.schedule.variance(level, 'base' if level == self.levels else 'detail')

	def _check_level(self, level):
		if int(level) != level or not 1 <= level <= self.levels:
			raise ContractError("level must lie in [1, {}], got {}".format(
				self.levels, level))

	def _pyramid(self, x):
		"""The details y_1..y_{S-1} and the images x_1..x_S of a batch."""

		details, images = [], [x]
		for _ in range(self.levels - 1):
			y, coarse = patch_split(images[-1], self.kind)
			details.append(y)
			images.append(coarse)

		return details, images

	def _level_inputs(self, level, details, images):
		if level < self.levels:
			return details[level - 1], images[level]
		return images[-1], None

	def _level_logp(self, level, state, cond, rng, spec, trace):
		block = self.blocks[level - 1]
		z, delta, ke, jn = block.forward_logp(state, cond, rng, spec, trace)
		prior = gaussian_logp(z, self.prior_variance(level), batch=True)
		return z, delta, prior, ke, jn

	def _images(self, x):
		return self._check_images(x, dtype=DTYPES[self.dtype])

	def log_likelihood(self, x, parallel=False, rng=None, spec=None, trace=None):
		"""The log-density of images in [0, 1) space.

		Every level is evaluated on its ground-truth (y_s | x_{s+1}) pair with
		its own random stream, so the sequential and the parallel evaluation
		give identical results.

		Parameters
		----------
		x : numpy.ndarray, shape=(N, C, H, W) or (C, H, W)

		parallel : bool
			Whether to evaluate the levels in concurrent threads.

		rng : None, int or numpy.random.Generator
			The seed of the per-level streams, defaults to the model seed.

		spec : IntegrationSpec or None
			Defaults to the evaluation integration.

		trace : TraceEstimator or None
			Defaults to the evaluation estimator.

		Returns
		-------
		logp : numpy.ndarray, shape=(N,)

		per_level : list of (numpy.ndarray, numpy.ndarray)
			The (delta_logp, prior_logp) of each level, finest first.

		ke, jn : numpy.ndarray, shape=(N,)
			The regularizers summed over levels.
		"""

		single = numpy.ndim(x) == 3
		x = self._images(x)
		spec = spec if spec is not None else self.eval_spec
		trace = trace if trace is not None else self.eval_trace
		rngs = level_rngs(self.seed if rng is None else rng, self.levels)
		details, images = self._pyramid(x)

		def evaluate(level):
			state, cond = self._level_inputs(level, details, images)
			_, delta, prior, ke, jn = self._level_logp(level, state, cond,
				rngs[level - 1], spec, trace)
			return delta.data, prior.data, ke.data, jn.data

		levels = range(1, self.levels + 1)
		if parallel and self.levels > 1:
			with ThreadPoolExecutor(max_workers=n_threads(self.levels)) as pool:
				results = list(pool.map(evaluate, levels))
		else:
			results = [evaluate(level) for level in levels]

		n = x.shape[0]
		logp = numpy.zeros(n, dtype=x.dtype)
		ke, jn = numpy.zeros(n, dtype=x.dtype), numpy.zeros(n, dtype=x.dtype)
		for delta, prior, level_ke, level_jn in results:
			logp += delta + prior
			ke += level_ke
			jn += level_jn

		logp += sum(self.level_logdet(s) for s in levels)
		per_level = [(delta, prior) for delta, prior, _, _ in results]

		if single:
			per_level = [(delta[0], prior[0]) for delta, prior in per_level]
			return logp[0], per_level, ke[0], jn[0]
		return logp, per_level, ke, jn

	def _batches(self, n, batch):
		starts = range(0, n, batch)
		return tqdm(starts) if self.verbose else starts

	def bpd(self, X, rng=None, batch=64, parallel=False):
		"""Bits per dimension of 8-bit images.

		The images are dequantized, their log-likelihood is computed in
		[0, 1) space and converted as -logp / (dims log 2) + 8.

		Returns
		-------
		bpd : numpy.ndarray, shape=(N,)
		"""

		X = self._check_images(X)
		if X.dtype != numpy.uint8:
			raise ContractError("bpd needs 8-bit images (dtype uint8).")

		rng = check_random_state(self.seed if rng is None else rng)
		values = []
		for start in self._batches(X.shape[0], batch):
			x = dequantize(X[start:start + batch], rng, self.dtype)
			logp = self.log_likelihood(x, parallel, rng)[0]
			values.append(-logp / (self.dims * LOG2) + 8.)

		return numpy.concatenate(values).astype('float64')

	def score_samples(self, X, rng=None):
		"""The log-likelihood of each 8-bit image in pixel space."""

		bpd = self.bpd(X, rng)
		return -bpd * self.dims * LOG2

	def encode(self, x, rng=None, spec=None, trace=None):
		"""The latents (z_1, ..., z_S) of images in [0, 1) space, computed with
		ground-truth conditioning."""

		x = self._images(x)
		spec = spec if spec is not None else self.eval_spec
		trace = trace if trace is not None else self.eval_trace
		rngs = level_rngs(self.seed if rng is None else rng, self.levels)
		details, images = self._pyramid(x)

		latents = []
		for level in range(1, self.levels + 1):
			state, cond = self._level_inputs(level, details, images)
			z = self._level_logp(level, state, cond, rngs[level - 1], spec, trace)[0]
			latents.append(z.data)

		return latents

	def decode(self, latents, spec=None, return_intermediates=False):
		"""Invert encode: run the blocks coarsest first, each conditioned on
		the image generated at the level above, and merge the levels.

		Parameters
		----------
		latents : list of numpy.ndarray
			(z_1, ..., z_S), each with a leading batch axis.

		spec : IntegrationSpec or None
			Defaults to the evaluation integration.

		return_intermediates : bool
			Whether to also return the images x_1..x_S.

		Returns
		-------
		x : numpy.ndarray, shape=(N, C, H, W)

		images : list of numpy.ndarray
			Only when return_intermediates is True, finest first.
		"""

		if len(latents) != self.levels:
			raise ContractError("decode needs {} latents, got {}".format(self.levels,
				len(latents)))

		spec = spec if spec is not None else self.eval_spec
		x = self.blocks[-1].inverse(latents[-1], spec=spec).data
		images = [x]

		for level in range(self.levels - 1, 0, -1):
			y = self.blocks[level - 1].inverse(latents[level - 1], x, spec).data
			x = patch_merge(y, x, self.kind)
			images.insert(0, x)

		if return_intermediates:
			return x, images
		return x

	def _draw_latent(self, level, count, temperature, rng):
		std = temperature * math.sqrt(self.prior_variance(level))
		noise = rng.standard_normal((count,) + self.state_shape(level))
		return (noise * std).astype(DTYPES[self.dtype])

	def generate(self, spec=None, return_intermediates=False):
		"""Sample images in [0, 1) space, unclamped.

		Parameters
		----------
		spec : SampleSpec or None
			The count, temperature and seed. Defaults to one sample at
			temperature 1.

		return_intermediates : bool
			Whether to also return the generated images at every level.
		"""

		spec = spec if spec is not None else SampleSpec()
		rng = check_random_state(spec.seed)

		latents = [None] * self.levels
		for level in range(self.levels, 0, -1):
			latents[level - 1] = self._draw_latent(level, spec.count,
				spec.temperature, rng)

		return self.decode(latents, return_intermediates=return_intermediates)

	def super_resolve(self, coarse, from_level, to_level=1, temperature=1., seed=0):
		"""Generate the finer levels of given coarse images.

		Parameters
		----------
		coarse : numpy.ndarray, shape=(N,) + level_shape(from_level)
			Images at level k, in [0, 1) space.

		from_level : int
			k.

		to_level : int
			j <= k, the level to stop at.

		temperature : float

		seed : None, int or numpy.random.Generator

		Returns
		-------
		x : numpy.ndarray, shape=(N,) + level_shape(to_level)
			Its average down to level k is the input.
		"""

		self._check_level(from_level)
		self._check_level(to_level)
		if to_level > from_level:
			raise ContractError("to_level {} is coarser than from_level {}".format(
				to_level, from_level))
		if not temperature > 0:
			raise ContractError("temperature must be positive.")

		x = numpy.asarray(coarse, dtype=DTYPES[self.dtype])
		single = x.ndim == 3
		if single:
			x = x[None]

		expected = self.level_shape(from_level)
		if x.ndim != 4 or x.shape[1:] != expected:
			raise DimensionError("level {} images must have shape {}, got {}".format(
				from_level, expected, x.shape[1:]))

		rng = check_random_state(seed)
		x = x.copy()
		for level in range(from_level - 1, to_level - 1, -1):
			z = self._draw_latent(level, x.shape[0], temperature, rng)
			y = self.blocks[level - 1].inverse(z, x, self.eval_spec).data
			x = patch_merge(y, x, self.kind)

		return x[0] if single else x

	def _state(self, level, lr=None):
		"""The optimizer, scheduler and log of a level, created on first use."""

		if level not in self._training:
			parameters = OrderedDict(self.blocks[level - 1].named_parameters())
			optimizer = Adam(parameters, lr=self.lr if lr is None else lr)
			self._training[level] = {
				'optimizer': optimizer,
				'scheduler': PlateauScheduler(optimizer, self.patience),
				'epoch': 0
			}
			self.logs.setdefault(level, TrainingLog(level))

		return self._training[level]

	def train_level(self, level, X, epochs=None, lr=None, batch=None, lambda_k=None,
		lambda_j=None, grad_clip=None, seed=None, callback=None):
		"""Train the flow of one level on its term of the log-likelihood.

		The loss of a batch is the mean negative log-likelihood of the level,
		normalized by the dimensions of the full image, plus the weighted
		kinetic energy and Jacobian norm. The conditioning images are always
		the ground-truth ones. Training continues from the last completed
		epoch up to `epochs`.

		Parameters
		----------
		level : int

		X : numpy.ndarray, shape=(n, C, H, W), dtype=uint8

		epochs : int or None
			The total number of epochs the level should have been trained for.
			Defaults to the model value.

		lr : float or None
			The learning rate. Only used when the optimizer is created.

		batch : int or None
			Defaults to the model value.

		lambda_k, lambda_j, grad_clip : float or None
			Default to the model values.

		seed : int or None
			Defaults to the model seed. Epoch e of level s draws from
			make_rng(seed, s, e).

		callback : callable or None
			Called as callback(model, level) after every epoch.

		Returns
		-------
		log : TrainingLog
		"""

		self._check_level(level)
		if self.frozen[level - 1]:
			raise ContractError("level {} is frozen".format(level))

		epochs = self.epochs if epochs is None else epochs
		batch = self.batch if batch is None else batch

		X = self._check_images(X)
		if X.dtype != numpy.uint8:
			raise ContractError("X must hold 8-bit images (dtype uint8).")
		if int(batch) != batch or batch < 1:
			raise ContractError("batch must be a positive integer.")

		lambda_k = self.lambda_k if lambda_k is None else lambda_k
		lambda_j = self.lambda_j if lambda_j is None else lambda_j
		grad_clip = self.grad_clip if grad_clip is None else grad_clip
		seed = self.seed if seed is None else seed

		state = self._state(level, lr)
		block = self.blocks[level - 1]
		optimizer, scheduler = state['optimizer'], state['scheduler']
		log = self.logs[level]
		variance = self.prior_variance(level)
		level_logdet = self.level_logdet(level)
		n = X.shape[0]

		epoch_range = range(state['epoch'] + 1, epochs + 1)
		if self.verbose:
			epoch_range = tqdm(epoch_range, desc="level {}".format(level))

		for epoch in epoch_range:
			rng = make_rng(seed, level, epoch)
			order = rng.permutation(n)
			x = dequantize(X[order], rng, self.dtype)
			details, images = self._pyramid(x)
			inputs, conds = self._level_inputs(level, details, images)

			good_parameters = block.state_dict()
			good_optimizer = {k: numpy.array(v) if isinstance(v, numpy.ndarray) else v
				for k, v in optimizer.state_dict().items()}

			totals = numpy.zeros(5)
			for step, start in enumerate(range(0, n, batch)):
				cond = None if conds is None else conds[start:start + batch]

				try:
					values = self._train_step(block, optimizer, inputs[start:start + batch],
						cond, rng, variance, level_logdet, lambda_k, lambda_j, grad_clip)
				except DivergenceError as error:
					block.load_state_dict(good_parameters)
					optimizer.load_state_dict(good_optimizer)
					logger.warning("level %d diverged in epoch %d, step %d: %s", level,
						epoch, step, error)
					raise TrainingDivergedError("training of level {} diverged in epoch "
						"{}: {}".format(level, epoch, error), level, log, step)

				totals += numpy.array(values) * min(batch, n - start)

			loss, bpd_contrib, ke, jn, grad_norm = totals / n
			log.append(epoch, loss, bpd_contrib, ke, jn, grad_norm)
			scheduler.step(loss)
			state['epoch'] = epoch

			logger.info("level %d epoch %d: loss %.6f, bpd contribution %.4f", level,
				epoch, loss, bpd_contrib)

			if callback is not None:
				callback(self, level)

		return log

	def _train_step(self, block, optimizer, state, cond, rng, variance,
		level_logdet, lambda_k, lambda_j, grad_clip):
		optimizer.zero_grad()

		with Tape() as tape:
			z, delta, ke, jn = block.forward_logp(state, cond, rng, self.train_spec,
				self.train_trace)
			prior = gaussian_logp(z, variance, batch=True)
			nll = -(delta + prior)
			loss = nll.mean() * (1. / self.dims) + ke.mean() * lambda_k + \
				jn.mean() * lambda_j

		if not numpy.isfinite(loss.item()):
			raise DivergenceError("non-finite loss")

		tape.backward(loss)
		grad_norm = clip_grad_norm(block.parameters(), grad_clip)
		if not numpy.isfinite(grad_norm):
			raise DivergenceError("non-finite gradient norm")

		optimizer.step()

		bpd_contrib = (nll.data.mean() - level_logdet) / (self.dims * LOG2)
		return (loss.item(), bpd_contrib, float(ke.data.mean()), float(jn.data.mean()),
			grad_norm)

	def _fit(self, X):
		levels = [s for s in range(1, self.levels + 1) if not self.frozen[s - 1]]
		if len(levels) == 0:
			raise ContractError("every level is frozen.")

		def train(level):
			return self.train_level(level, X)

		workers = n_threads(min(self.n_jobs, len(levels)))
		if workers > 1:
			with ThreadPoolExecutor(max_workers=workers) as pool:
				list(pool.map(train, levels))
		else:
			for level in levels:
				train(level)

	def transform(self, X, y=None):
		"""The latents (z_1, ..., z_S) of 8-bit images."""

		X = self._check_images(X)
		if X.dtype == numpy.uint8:
			X = dequantize(X, self.seed, self.dtype)
		return self.encode(X)

	def grow(self):
		"""A model with one more, finer level.

		The new model has twice the resolution. Its levels 2..S+1 hold copies
		of the trained blocks of this model and are frozen, and the prior
		variances of those levels are unchanged. Only level 1 is trained.
		"""

		grown = MrcnfModel(self.levels + 1, self.channels,
			(2 * self.height, 2 * self.width), self.kind, self.noise_schedule,
			self.hidden, self.n_blocks, self.train_spec, self.eval_spec,
			self.train_trace, self.eval_trace, self.lr, self.lambda_k, self.lambda_j,
			self.grad_clip, self.patience, self.epochs, self.batch, self.seed,
			self.dtype, self.finest_offset + 1, self.n_jobs, self.verbose)

		for level, block in enumerate(self.blocks, 2):
			grown.blocks[level - 1].load_state_dict(block.state_dict())
			grown.frozen[level - 1] = True

		return grown


def _format(value):
	if isinstance(value, float):
		return repr(value)
	if isinstance(value, bool):
		return str(int(value))
	return str(value)

def _format_spec(spec):
	return 'method:{},steps:{},rtol:{!r},atol:{!r},t0:{!r},t1:{!r},max_steps:{}'.format(
		spec.method, spec.steps, spec.rtol, spec.atol, spec.t0, spec.t1,
		spec.max_steps)

def _parse_spec(text):
	fields = dict(item.split(':', 1) for item in text.split(','))
	return IntegrationSpec(fields['method'], int(fields['steps']),
		float(fields['rtol']), float(fields['atol']), float(fields['t0']),
		float(fields['t1']), int(fields['max_steps']))

def _format_trace(trace):
	return 'mode:{},noise:{},samples:{},exact_max_dims:{}'.format(trace.mode,
		trace.noise, trace.samples, trace.exact_max_dims)

def _parse_trace(text):
	fields = dict(item.split(':', 1) for item in text.split(','))
	return TraceEstimator(fields['mode'], fields['noise'], int(fields['samples']),
		int(fields['exact_max_dims']))

def _model_manifest(model):
	"""The key=value fields that rebuild a model, shared by every level file."""

	return OrderedDict([
		('format', CHECKPOINT_VERSION),
		('levels', model.levels),
		('channels', model.channels),
		('height', model.height),
		('width', model.width),
		('kind', model.kind),
		('schedule', 'on' if model.noise_schedule else 'off'),
		('finest_offset', model.finest_offset),
		('hidden', model.hidden),
		('blocks', model.n_blocks),
		('train_spec', _format_spec(model.train_spec)),
		('eval_spec', _format_spec(model.eval_spec)),
		('train_trace', _format_trace(model.train_trace)),
		('eval_trace', _format_trace(model.eval_trace)),
		('lr', float(model.lr)),
		('lambda_k', float(model.lambda_k)),
		('lambda_j', float(model.lambda_j)),
		('grad_clip', float(model.grad_clip)),
		('patience', model.patience),
		('epochs', model.epochs),
		('batch', model.batch),
		('seed', model.seed),
		('dtype', model.dtype),
	])

MODEL_KEYS = ('format', 'levels', 'channels', 'height', 'width', 'kind',
	'schedule', 'finest_offset', 'hidden', 'blocks', 'train_spec', 'eval_spec',
	'train_trace', 'eval_trace', 'lr', 'lambda_k', 'lambda_j', 'grad_clip',
	'patience', 'epochs', 'batch', 'seed', 'dtype')

def _model_from_manifest(manifest):
	return MrcnfModel(levels=int(manifest['levels']),
		channels=int(manifest['channels']),
		resolution=(int(manifest['height']), int(manifest['width'])),
		transform=manifest['kind'], noise_schedule=manifest['schedule'] == 'on',
		hidden=int(manifest['hidden']), blocks=int(manifest['blocks']),
		train_spec=_parse_spec(manifest['train_spec']),
		eval_spec=_parse_spec(manifest['eval_spec']),
		train_trace=_parse_trace(manifest['train_trace']),
		eval_trace=_parse_trace(manifest['eval_trace']), lr=float(manifest['lr']),
		lambda_k=float(manifest['lambda_k']), lambda_j=float(manifest['lambda_j']),
		grad_clip=float(manifest['grad_clip']), patience=int(manifest['patience']),
		epochs=int(manifest['epochs']), batch=int(manifest['batch']),
		seed=int(manifest['seed']), dtype=manifest['dtype'],
		finest_offset=int(manifest['finest_offset']))

def encode_level(model, level):
	"""The checkpoint bytes of one level: a UTF-8 key=value manifest, a line
	holding `---`, and the MRTF blobs named by the `tensors` key, in order."""

	model._check_level(level)
	block = model.blocks[level - 1]

	manifest = _model_manifest(model)
	manifest['level'] = level
	manifest['frozen'] = model.frozen[level - 1]
	manifest['state_shape'] = 'x'.join(str(d) for d in block.state_shape)
	manifest['variance'] = float(model.prior_variance(level))

	tensors = OrderedDict(('param.' + name, tensor.data) for name, tensor
		in block.named_parameters())

	state = model._training.get(level)
	if state is not None:
		optimizer, scheduler = state['optimizer'], state['scheduler']
		manifest['train.epoch'] = state['epoch']
		manifest['train.lr'] = float(optimizer.lr)
		manifest['train.adam_t'] = optimizer.t
		manifest['train.best'] = float(scheduler.best)
		manifest['train.bad_epochs'] = scheduler.bad_epochs

		for name in optimizer.parameters:
			tensors['adam.m.' + name] = optimizer.m[name]
			tensors['adam.v.' + name] = optimizer.v[name]

	if level in model.logs:
		tensors['log'] = model.logs[level].to_array()

	manifest['tensors'] = ','.join(tensors)

	header = ''.join('{}={}\n'.format(key, _format(value)) for key, value
		in manifest.items()) + '---\n'
	return header.encode('utf-8') + b''.join(encode_mrtf(numpy.asarray(array))
		for array in tensors.values())

def decode_level(buffer):
	"""Parse checkpoint bytes into the manifest and the named arrays."""

	end = buffer.find(b'\n---\n')
	if end < 0:
		raise FormatError("missing the `---` line that ends the manifest",
			len(buffer))

	manifest, offset = OrderedDict(), 0
	for line in buffer[:end].split(b'\n'):
		try:
			text = line.decode('utf-8')
		except UnicodeDecodeError as error:
			raise FormatError("manifest is not UTF-8", offset + error.start)

		if '=' not in text:
			raise FormatError("malformed manifest line {!r}".format(text), offset)

		key, value = text.split('=', 1)
		manifest[key] = value
		offset += len(line) + 1

	for key in MODEL_KEYS + ('level', 'tensors'):
		if key not in manifest:
			raise FormatError("manifest has no {!r} field".format(key), end)
	if int(manifest['format']) != CHECKPOINT_VERSION:
		raise FormatError("unsupported checkpoint format {}".format(
			manifest['format']), 0)

	names = [name for name in manifest['tensors'].split(',') if name != '']
	tensors, position = OrderedDict(), end + 5
	for name in names:
		tensors[name], position = decode_mrtf(buffer, position)

	if position != len(buffer):
		raise FormatError("trailing bytes after the last tensor", position)

	return manifest, tensors

def checkpoint_path(directory, level):
	return os.path.join(directory, 'level_{}.ckpt'.format(level))

def save_checkpoint(model, directory, levels=None):
	"""Write one file per level, level_{s}.ckpt, into a directory.

	Each file is written to a temporary name and renamed, so an interrupted
	run leaves the previous checkpoint intact.
	"""

	os.makedirs(directory, exist_ok=True)
	levels = range(1, model.levels + 1) if levels is None else levels

	for level in levels:
		path = checkpoint_path(directory, level)
		with open(path + '.tmp', 'wb') as outfile:
			outfile.write(encode_level(model, level))
		os.replace(path + '.tmp', path)
		logger.debug("wrote %s", path)

def load_checkpoint(directory):
	"""Rebuild a model from the level files of a directory.

	Levels without a file keep their seeded initial parameters. All files
	must describe the same model.
	"""

	if not os.path.isdir(directory):
		raise FileNotFoundError("no checkpoint directory at {}".format(directory))

	files = sorted(name for name in os.listdir(directory)
		if name.startswith('level_') and name.endswith('.ckpt'))
	if len(files) == 0:
		raise FileNotFoundError("no level_*.ckpt files in {}".format(directory))

	parsed = []
	for name in files:
		with open(os.path.join(directory, name), 'rb') as infile:
			parsed.append(decode_level(infile.read()))

	reference = parsed[0][0]
	model = _model_from_manifest(reference)

	for manifest, tensors in parsed:
		for key in MODEL_KEYS:
			if manifest[key] != reference[key]:
				raise FormatError("level {} disagrees with level {} on {}".format(
					manifest['level'], reference['level'], key), 0)

		level = int(manifest['level'])
		model._check_level(level)
		block = model.blocks[level - 1]

		block.load_state_dict({name[len('param.'):]: array for name, array
			in tensors.items() if name.startswith('param.')})
		model.frozen[level - 1] = manifest.get('frozen', '0') == '1'

		if 'train.epoch' in manifest:
			state = model._state(level)
			optimizer, scheduler = state['optimizer'], state['scheduler']
			optimizer_state = {'t': int(manifest['train.adam_t']),
				'lr': float(manifest['train.lr'])}
			optimizer_state.update((name, array) for name, array in tensors.items()
				if name.startswith('adam.'))
			optimizer.load_state_dict(optimizer_state)

			scheduler.best = float(manifest['train.best'])
			scheduler.bad_epochs = int(manifest['train.bad_epochs'])
			state['epoch'] = int(manifest['train.epoch'])

		if 'log' in tensors:
			model.logs[level] = TrainingLog(level, tensors['log'])

	logger.info("loaded %d level checkpoints from %s", len(parsed), directory)
	return model
