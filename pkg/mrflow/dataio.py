# dataio.py

"""
This code contains everything that moves images in and out of the engine:
dequantization of 8-bit pixels, PNG and PGM image files, the builtin
synthetic data sets, directory data sets, the patch shuffling used by the
out-of-distribution study, and the configuration file reader.
"""

import os
import math
import logging

from collections import OrderedDict

import numpy

from PIL import Image

from .utils import check_random_state
from .utils import make_rng
from .tensor import Tensor
from .tensor import DTYPES
from .errors import ConfigError
from .errors import ContractError
from .errors import DimensionError
from .errors import FormatError

logger = logging.getLogger(__name__)

BUILTINS = ('two_gaussians', 'checkerboard_patches', 'constant', 'uniform_noise')
IMAGE_EXTENSIONS = ('.png', '.pgm')

_SPLITS = {'train': 1, 'eval': 2}


def _pixels(x):
	return x.data if isinstance(x, Tensor) else numpy.asarray(x)

def dequantize(x, rng=None, dtype='f64'):
	"""Map 8-bit pixels a to b = (a + u) / 256 with u ~ Uniform[0, 1).

	Parameters
	----------
	x : numpy.ndarray or Tensor, dtype=uint8
		Pixels in [0, 255].

	rng : None, int or numpy.random.Generator
		The source of the uniform noise.

	dtype : str
		'f64' or 'f32'.

	Returns
	-------
	b : numpy.ndarray
		Values in [0, 1) with the shape of x.
	"""

	x = _pixels(x)
	if x.dtype != numpy.uint8:
		raise ContractError("dequantize needs 8-bit pixels (dtype uint8), got "
			"{}".format(x.dtype))

	rng = check_random_state(rng)
	u = rng.random(x.shape)
	return ((x + u) / 256.).astype(DTYPES[dtype])

def quantize(x):
	"""Clamp floats to [0, 1] and map them to 8-bit pixels by floor(x * 256),
	capped at 255."""

	x = numpy.clip(_pixels(x).astype('float64'), 0., 1.)
	return numpy.minimum(numpy.floor(x * 256.), 255.).astype(numpy.uint8)

def _as_pixels(image):
	image = _pixels(image)
	if image.dtype != numpy.uint8:
		image = quantize(image)
	if image.ndim == 2:
		image = image[None]
	if image.ndim != 3:
		raise DimensionError("an image must have shape (C, H, W), got {}".format(
			image.shape))
	return image

def encode_pgm(image):
	"""A 1-channel uint8 image as binary PGM (P5) bytes."""

	image = _as_pixels(image)
	if image.shape[0] != 1:
		raise DimensionError("PGM holds exactly one channel, got {}".format(
			image.shape[0]))

	_, height, width = image.shape
	header = 'P5\n{} {}\n255\n'.format(width, height).encode('ascii')
	return header + numpy.ascontiguousarray(image[0]).tobytes()

def decode_pgm(buffer):
	"""Parse binary PGM bytes into a (1, H, W) uint8 image."""

	fields = []
	if buffer[:2] != b'P5':
		raise FormatError("missing PGM magic number P5", 0)
	offset = 2

	while len(fields) < 3:
		while offset < len(buffer) and buffer[offset:offset + 1].isspace():
			offset += 1

		if buffer[offset:offset + 1] == b'#':
			while offset < len(buffer) and buffer[offset:offset + 1] not in b'\r\n':
				offset += 1
			continue

		start = offset
		while offset < len(buffer) and buffer[offset:offset + 1].isdigit():
			offset += 1

		if start == offset:
			raise FormatError("expected a number in the PGM header", offset)
		fields.append((int(buffer[start:offset]), start))

	if offset >= len(buffer) or not buffer[offset:offset + 1].isspace():
		raise FormatError("missing whitespace after the PGM header", offset)
	offset += 1

	(width, _), (height, _), (maxval, maxval_offset) = fields
	if maxval != 255:
		raise FormatError("only 8-bit PGM files are supported, maxval is "
			"{}".format(maxval), maxval_offset)

	n_bytes = width * height
	if len(buffer) < offset + n_bytes:
		raise FormatError("truncated PGM payload, expected {} bytes".format(n_bytes),
			len(buffer))

	pixels = numpy.frombuffer(buffer, dtype=numpy.uint8, count=n_bytes,
		offset=offset)
	return pixels.reshape(1, height, width).copy()

def load_image(path):
	"""Read a PNG or PGM file as a (C, H, W) uint8 array."""

	if path.lower().endswith('.pgm'):
		with open(path, 'rb') as infile:
			return decode_pgm(infile.read())

	try:
		with Image.open(path) as image:
			image.load()
			pixels = numpy.asarray(image)
	except (OSError, SyntaxError) as error:
		raise FormatError("cannot read image {}: {}".format(path, error), 0)

	if pixels.dtype != numpy.uint8:
		raise FormatError("{} is not an 8-bit image".format(path), 0)
	if pixels.ndim == 2:
		return pixels[None].copy()
	return numpy.ascontiguousarray(pixels.transpose(2, 0, 1))

def save_image(path, image):
	"""Write a (C, H, W) image as PNG, or as PGM for a .pgm path.

	Float images are clamped to [0, 1] and quantized, uint8 images are
	written as they are.
	"""

	image = _as_pixels(image)

	if path.lower().endswith('.pgm'):
		with open(path, 'wb') as outfile:
			outfile.write(encode_pgm(image))
		return

	modes = {1: 'L', 3: 'RGB', 4: 'RGBA'}
	if image.shape[0] not in modes:
		raise DimensionError("PNG images need 1, 3 or 4 channels, got {}".format(
			image.shape[0]))

	pixels = image[0] if image.shape[0] == 1 else image.transpose(1, 2, 0)
	Image.fromarray(numpy.ascontiguousarray(pixels)).save(path, format='PNG')

def shuffle_patches(x, k, rng=None):
	"""Cut every image into k x k patches and permute the patch positions.

	All channels of a patch move together, and each image of a batch gets
	its own uniformly random permutation.

	Parameters
	----------
	x : numpy.ndarray, shape=(C, H, W) or (N, C, H, W)

	k : int
		The patch size, which must divide H and W.

	rng : None, int or numpy.random.Generator

	Returns
	-------
	shuffled : numpy.ndarray
	"""

	x = _pixels(x)
	single = x.ndim == 3
	if single:
		x = x[None]
	if x.ndim != 4:
		raise DimensionError("shuffle_patches needs (C, H, W) images, got shape "
			"{}".format(x.shape))

	n, channels, height, width = x.shape
	if int(k) != k or k < 1 or height % k != 0 or width % k != 0:
		raise DimensionError("patch size {} does not divide a {}x{} image".format(
			k, height, width))

	rng = check_random_state(rng)
	rows, cols = height // k, width // k

	patches = x.reshape(n, channels, rows, k, cols, k).transpose(0, 1, 2, 4, 3, 5)
	patches = patches.reshape(n, channels, rows * cols, k, k)

	shuffled = numpy.empty_like(patches)
	for i in range(n):
		shuffled[i] = patches[i][:, rng.permutation(rows * cols)]

	shuffled = shuffled.reshape(n, channels, rows, cols, k, k).transpose(0, 1, 2, 4, 3, 5)
	shuffled = shuffled.reshape(n, channels, height, width)
	return shuffled[0] if single else shuffled

def make_builtin(name, count, channels=1, resolution=8, rng=None):
	"""Draw a synthetic 8-bit data set.

	Parameters
	----------
	name : str
		'two_gaussians' : noisy copies of one of two smooth ramps, the
			structured data set the models are trained on.
		'checkerboard_patches' : two-tone checkerboards with a random square
			size and random tones.
		'constant' : images of one random gray level.
		'uniform_noise' : i.i.d. uniform pixels.

	count : int
		The number of images.

	channels : int

	resolution : int or tuple
		H = W, or (H, W).

	rng : None, int or numpy.random.Generator

	Returns
	-------
	X : numpy.ndarray, shape=(count, channels, H, W), dtype=uint8
	"""

	if name not in BUILTINS:
		raise ContractError("unknown builtin data set {!r}, expected one of "
			"{}".format(name, BUILTINS))
	if int(count) != count or count < 1:
		raise ContractError("count must be a positive integer.")

	height, width = _extent(resolution)
	rng = check_random_state(rng)
	shape = (count, channels, height, width)

	if name == 'uniform_noise':
		return rng.integers(0, 256, shape).astype(numpy.uint8)

	if name == 'constant':
		levels = rng.integers(0, 256, (count, 1, 1, 1))
		return numpy.broadcast_to(levels, shape).astype(numpy.uint8)

	if name == 'checkerboard_patches':
		sizes = [s for s in (1, 2, 4, 8, 16, 32) if height % s == 0 and width % s == 0]
		rows = numpy.arange(height)[:, None]
		cols = numpy.arange(width)[None, :]

		X = numpy.empty(shape, dtype=numpy.uint8)
		for i in range(count):
			size = sizes[rng.integers(len(sizes))]
			tones = rng.integers(0, 256, (2, channels, 1, 1))
			board = ((rows // size + cols // size) % 2).astype(bool)
			X[i] = numpy.where(board[None], tones[1], tones[0])
		return X

	ramp_h = numpy.linspace(64., 192., width)[None, :].repeat(height, 0)
	ramp_v = numpy.linspace(64., 192., height)[:, None].repeat(width, 1)
	templates = numpy.stack([ramp_h, ramp_v])

	labels = rng.integers(0, 2, count)
	X = templates[labels][:, None] + rng.normal(0., 6., shape)
	return numpy.clip(numpy.round(X), 0, 255).astype(numpy.uint8)

def _extent(resolution):
	if isinstance(resolution, (tuple, list)):
		height, width = resolution
	else:
		height = width = resolution

	if int(height) != height or int(width) != width or height < 1 or width < 1:
		raise ContractError("resolution must be positive, got {}".format(resolution))
	return int(height), int(width)


class DatasetSpec(object):
	"""Where a data set comes from and how much of it to use.

	Parameters
	----------
	source : str
		'builtin:NAME' for a synthetic data set, otherwise a directory of
		PNG / PGM files. A directory holding a `train` or `eval`
		subdirectory is read from the subdirectory matching the split.

	split : str
		'train' or 'eval'. Builtin splits are drawn from disjoint streams.

	resolution : int, tuple or None
		The expected H = W (or (H, W)). Required for builtin data sets.

	channels : int or None
		The expected number of channels. Builtin data sets default to 1.

	count : int or None
		The number of builtin images, or the largest number of files read.

	seed : int
		The seed of builtin data sets.
	"""

	def __init__(self, source, split='train', resolution=None, channels=None,
		count=None, seed=0):
		if split not in _SPLITS:
			raise ContractError("split must be 'train' or 'eval', got {!r}".format(split))

		self.source = source
		self.split = split
		self.resolution = resolution
		self.channels = channels
		self.count = count
		self.seed = seed

	@property
	def builtin(self):
		return self.source.startswith('builtin:')

	def load(self):
		"""The images as a (N, C, H, W) uint8 array."""

		if self.builtin:
			name = self.source[len('builtin:'):]
			if self.resolution is None or self.count is None:
				raise ContractError("builtin data sets need a resolution and a count.")

			rng = make_rng(self.seed, _SPLITS[self.split])
			return make_builtin(name, self.count, self.channels or 1,
				self.resolution, rng)

		return self._load_directory()

	def _load_directory(self):
		if not os.path.isdir(self.source):
			raise FileNotFoundError("no data directory at {}".format(self.source))

		directory = self.source
		if os.path.isdir(os.path.join(directory, self.split)):
			directory = os.path.join(directory, self.split)

		names = sorted(name for name in os.listdir(directory)
			if name.lower().endswith(IMAGE_EXTENSIONS))
		if self.count is not None:
			names = names[:self.count]
		if len(names) == 0:
			raise ContractError("no PNG or PGM images in {}".format(directory))

		images = [load_image(os.path.join(directory, name)) for name in names]
		shape = images[0].shape
		for name, image in zip(names, images):
			if image.shape != shape:
				raise DimensionError("{} has shape {} but {} has shape {}".format(
					name, image.shape, names[0], shape))

		if self.channels is not None and shape[0] != self.channels:
			raise DimensionError("images have {} channels, expected {}".format(
				shape[0], self.channels))
		if self.resolution is not None and shape[1:] != _extent(self.resolution):
			raise DimensionError("images are {}x{}, expected {}x{}".format(
				shape[1], shape[2], *_extent(self.resolution)))

		logger.info("loaded %d images of shape %s from %s", len(images), shape,
			directory)
		return numpy.stack(images)


def _positive_int(value):
	value = int(value)
	if value < 1:
		raise ValueError("must be a positive integer")
	return value

def _non_negative_int(value):
	value = int(value)
	if value < 0:
		raise ValueError("must be a non-negative integer")
	return value

def _positive_float(value):
	value = float(value)
	if not value > 0 or not math.isfinite(value):
		raise ValueError("must be a positive number")
	return value

def _non_negative_float(value):
	value = float(value)
	if not value >= 0 or not math.isfinite(value):
		raise ValueError("must be a non-negative number")
	return value

def _choice(*options):
	def parse(value):
		if value not in options:
			raise ValueError("must be one of {}".format(', '.join(options)))
		return value
	return parse

_METHODS = _choice('euler', 'rk4', 'adaptive_rk45')

# key: (parser, default)
CONFIG_KEYS = OrderedDict([
	('levels', (_positive_int, 2)),
	('transform', (_choice('unimodular', 'haar'), 'unimodular')),
	('noise_schedule', (_choice('on', 'off'), 'on')),
	('channels', (_positive_int, 1)),
	('resolution', (_positive_int, 8)),
	('dtype', (_choice('f64', 'f32'), 'f64')),
	('solver.method', (_METHODS, 'rk4')),
	('solver.steps', (_positive_int, 8)),
	('solver.rtol', (_positive_float, 1e-5)),
	('solver.atol', (_positive_float, 1e-5)),
	('eval.method', (_METHODS, 'adaptive_rk45')),
	('eval.steps', (_positive_int, 8)),
	('eval.rtol', (_positive_float, 1e-5)),
	('eval.atol', (_positive_float, 1e-5)),
	('net.blocks', (_positive_int, 2)),
	('net.hidden', (_positive_int, 64)),
	('trace.mode', (_choice('auto', 'exact', 'hutchinson'), 'hutchinson')),
	('trace.noise', (_choice('gaussian', 'rademacher'), 'gaussian')),
	('trace.samples', (_positive_int, 1)),
	('train.lr', (_non_negative_float, 1e-3)),
	('train.batch', (_positive_int, 64)),
	('train.epochs', (_non_negative_int, 10)),
	('train.lambda_k', (_non_negative_float, 0.01)),
	('train.lambda_j', (_non_negative_float, 0.01)),
	('train.grad_clip', (_positive_float, 100.)),
	('train.patience', (_positive_int, 2)),
	('data.train_count', (_positive_int, 512)),
	('data.eval_count', (_positive_int, 128)),
	('seed', (int, 0)),
])


class Config(object):
	"""A validated set of configuration values.

	Every key of CONFIG_KEYS is present, holding either the value read from
	a file or its default. Values are read with config['solver.method'].

	Parameters
	----------
	values : dict or None
		Overrides of the defaults, already parsed or as strings.
	"""

	def __init__(self, values=None):
		self._values = OrderedDict((key, default) for key, (_, default)
			in CONFIG_KEYS.items())

		for key, value in (values or {}).items():
			self.set(key, value)

		self.validate()

	def __getitem__(self, key):
		return self._values[key]

	def __contains__(self, key):
		return key in self._values

	def __repr__(self):
		return "Config({})".format(dict(self._values))

	def items(self):
		return self._values.items()

	def set(self, key, value, line=None):
		if key not in CONFIG_KEYS:
			raise ConfigError("unknown configuration key {!r}".format(key), line)

		parser = CONFIG_KEYS[key][0]
		try:
			self._values[key] = parser(value)
		except (TypeError, ValueError) as error:
			raise ConfigError("invalid value {!r} for {}: {}".format(value, key, error),
				line)

	def validate(self):
		factor = 2 ** (self['levels'] - 1)
		if self['resolution'] % factor != 0:
			raise ConfigError("resolution {} is not divisible by 2^(levels-1) = "
				"{}".format(self['resolution'], factor))

def parse_config(text):
	"""Parse flat `key = value` lines. `#` starts a comment, blank lines are
	skipped, and unknown or repeated keys are errors."""

	seen = {}
	config = Config()

	for number, raw in enumerate(text.splitlines(), 1):
		line = raw.split('#', 1)[0].strip()
		if line == '':
			continue

		if '=' not in line:
			raise ConfigError("expected `key = value`, got {!r}".format(raw.strip()),
				number)

		key, value = (part.strip() for part in line.split('=', 1))
		if key in seen:
			raise ConfigError("{} is already set on line {}".format(key, seen[key]),
				number)

		config.set(key, value, number)
		seen[key] = number

	config.validate()
	return config

def load_config(path):
	"""Read a configuration file. A missing path gives the defaults."""

	if path is None:
		return Config()

	with open(path, 'rb') as infile:
		raw = infile.read()

	try:
		text = raw.decode('utf-8')
	except UnicodeDecodeError as error:
		raise ConfigError("{} is not UTF-8 (byte {})".format(path, error.start))

	config = parse_config(text)
	logger.info("loaded configuration from %s", path)
	return config
