# cli.py

"""
The mrflow command line. Every subcommand reads its inputs from files and
writes its results as files, CSV tables and PNG images.

Exit codes: 0 on success, 2 for usage, configuration, data, format and
contract errors, and 3 when an integration or a training run diverges.
"""

import os
import csv
import sys
import logging
import argparse

from concurrent.futures import ThreadPoolExecutor

import numpy

from .utils import n_threads
from .tensor import save_tensor
from .tensor import load_tensor
from .cnf import TraceEstimator
from .odeint import IntegrationSpec
from .mrcnf import MrcnfModel
from .mrcnf import SampleSpec
from .mrcnf import checkpoint_path
from .mrcnf import load_checkpoint
from .mrcnf import save_checkpoint
from .dataio import DatasetSpec
from .dataio import load_config
from .dataio import load_image
from .dataio import save_image
from .multires import ResolutionStack
from .multires import compose
from .multires import decompose
from .multires import downsample_avg
from .ood import ood_report
from .ood import shuffle_study
from .ood import DETECTORS
from .errors import ConfigError
from .errors import ContractError
from .errors import DimensionError
from .errors import DivergenceError
from .errors import FormatError

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_DIVERGED = 3

MEAN_CONSISTENCY_TOL = 1e-6


def model_from_config(config):
	"""Build an untrained model from a Config."""

	train_spec = IntegrationSpec(config['solver.method'], config['solver.steps'],
		config['solver.rtol'], config['solver.atol'])
	eval_spec = IntegrationSpec(config['eval.method'], config['eval.steps'],
		config['eval.rtol'], config['eval.atol'])
	train_trace = TraceEstimator(config['trace.mode'], config['trace.noise'],
		config['trace.samples'])

	return MrcnfModel(levels=config['levels'], channels=config['channels'],
		resolution=config['resolution'], transform=config['transform'],
		noise_schedule=config['noise_schedule'] == 'on', hidden=config['net.hidden'],
		blocks=config['net.blocks'], train_spec=train_spec, eval_spec=eval_spec,
		train_trace=train_trace, lr=config['train.lr'],
		lambda_k=config['train.lambda_k'], lambda_j=config['train.lambda_j'],
		grad_clip=config['train.grad_clip'], patience=config['train.patience'],
		epochs=config['train.epochs'], batch=config['train.batch'],
		seed=config['seed'], dtype=config['dtype'])

def _to_unit(pixels):
	"""8-bit pixels to the centers of their [0, 1) bins."""

	return (pixels.astype('float64') + 0.5) / 256.

def _dataset(source, split, model, count, seed):
	spec = DatasetSpec(source, split, (model.height, model.width), model.channels,
		count if source.startswith('builtin:') else None, seed)
	return spec.load()

def _write_rows(path, header, rows):
	with open(path, 'w', newline='') as outfile:
		writer = csv.writer(outfile, lineterminator='\n')
		writer.writerow(header)
		writer.writerows(rows)

def train(args):
	config = load_config(args.config)

	resume = args.resume and os.path.exists(checkpoint_path(args.out, 1))
	if resume:
		model = load_checkpoint(args.out)
		model.epochs = config['train.epochs']
	else:
		model = model_from_config(config)

	spec = DatasetSpec(args.data, 'train', config['resolution'], config['channels'],
		config['data.train_count'] if args.data.startswith('builtin:') else None,
		config['seed'])
	X = spec.load()

	if args.level == 'all':
		levels = [s for s in range(1, model.levels + 1) if not model.frozen[s - 1]]
	else:
		levels = [int(args.level)]

	# levels trained by an earlier run keep their files
	if not resume:
		save_checkpoint(model, args.out, [s for s in range(1, model.levels + 1)
			if not os.path.exists(checkpoint_path(args.out, s))])

	def checkpoint(model, level):
		save_checkpoint(model, args.out, [level])

	def train_one(level):
		return model.train_level(level, X, callback=checkpoint)

	workers = n_threads(args.jobs or len(levels))
	if len(levels) > 1 and workers > 1:
		with ThreadPoolExecutor(max_workers=workers) as pool:
			list(pool.map(train_one, levels))
	else:
		for level in levels:
			train_one(level)

	save_checkpoint(model, args.out, levels)

	rows = []
	for level in sorted(model.logs):
		rows.extend(model.logs[level].csv_rows())
	_write_rows(os.path.join(args.out, 'train_log.csv'), ['level', 'epoch', 'loss',
		'bpd_contrib', 'ke', 'jn', 'grad_norm'], rows)

	for level in levels:
		log = model.logs[level]
		if len(log) > 0:
			print("level {}: {} epochs, final loss {:.6f}".format(level, len(log),
				log['loss'][-1]))

def bpd(args):
	model = load_checkpoint(args.ckpt)
	X = _dataset(args.data, 'eval', model, args.count, model.seed)

	values = model.bpd(X, rng=args.seed)
	os.makedirs(args.out, exist_ok=True)
	_write_rows(os.path.join(args.out, 'bpd.csv'), ['image_id', 'bpd'],
		[[i, repr(float(v))] for i, v in enumerate(values)])

	print("bpd {:.4f} +- {:.4f} over {} images".format(values.mean(), values.std(),
		len(values)))

def generate(args):
	model = load_checkpoint(args.ckpt)
	spec = SampleSpec(args.num, args.temperature, args.seed)
	X = model.generate(spec)

	os.makedirs(args.out, exist_ok=True)
	for i, x in enumerate(X):
		save_image(os.path.join(args.out, 'sample_{:04d}.png'.format(i)), x)

	rows = []
	for level in range(1, model.levels + 1):
		role = 'base' if level == model.levels else 'detail'
		variance = model.prior_variance(level)
		rows.append([args.seed, level, role, repr(variance), repr(args.temperature),
			repr(args.temperature ** 2 * variance)])

	_write_rows(os.path.join(args.out, 'noise_manifest.csv'), ['seed', 'level',
		'role', 'variance', 'temperature', 'sampled_variance'], rows)
	print("wrote {} samples to {}".format(len(X), args.out))

def superres(args):
	model = load_checkpoint(args.ckpt)
	pixels = load_image(args.input)

	expected = model.level_shape(args.from_level)
	if pixels.shape != expected:
		raise DimensionError("the input of level {} must have shape {}, got "
			"{}".format(args.from_level, expected, pixels.shape))

	coarse = _to_unit(pixels)
	x = model.super_resolve(coarse, args.from_level, args.to_level,
		args.temperature, args.seed)

	average = x
	for _ in range(args.from_level - args.to_level):
		average = downsample_avg(average)

	error = float(numpy.abs(average - coarse).max())
	print("mean consistency {:.3e}".format(error))
	save_image(args.out, x)

	if error >= MEAN_CONSISTENCY_TOL:
		raise ContractError("mean consistency {:.3e} exceeds {:g}".format(error,
			MEAN_CONSISTENCY_TOL))

def ood(args):
	model = load_checkpoint(args.ckpt)
	in_data = _dataset(args.in_data, 'eval', model, args.count, model.seed)
	ood_data = _dataset(args.ood_data, 'eval', model, args.count, model.seed + 1)

	report = ood_report(model, in_data, ood_data, args.detector)
	report.write_csv(args.out)

	for detector in report.detectors:
		print("{} auROC {:.4f}".format(detector, report.auroc[detector]))

def shuffle(args):
	model = load_checkpoint(args.ckpt)
	X = _dataset(args.data, 'eval', model, args.count, model.seed)

	study = shuffle_study(model, X, args.sizes, args.seed)
	study.write_csv(args.out)

	for k, mean, std in study.rows:
		print("patch size {}: bpd {:.4f} +- {:.4f}".format(k, mean, std))

def decompose_command(args):
	pixels = load_image(args.input)
	stack = decompose(_to_unit(pixels), args.levels, args.transform)

	os.makedirs(args.out, exist_ok=True)
	for s, y in enumerate(stack.details, 1):
		save_tensor(os.path.join(args.out, 'detail_{}.mrtf'.format(s)), y)
		groups = numpy.split(numpy.clip(0.5 + y, 0., 1.), 3, axis=0)
		save_image(os.path.join(args.out, 'detail_{}.png'.format(s)),
			numpy.concatenate(groups, axis=2))

	save_tensor(os.path.join(args.out, 'base_{}.mrtf'.format(stack.levels)),
		stack.base)
	save_image(os.path.join(args.out, 'base_{}.png'.format(stack.levels)), stack.base)

	with open(os.path.join(args.out, 'stack.txt'), 'w') as outfile:
		outfile.write("levels={}\nkind={}\n".format(stack.levels, stack.kind))

	print("logdet_total {:.4f}".format(stack.logdet_total))

def compose_command(args):
	fields = {}
	try:
		with open(os.path.join(args.input, 'stack.txt')) as infile:
			for line in infile:
				if '=' in line:
					key, value = line.strip().split('=', 1)
					fields[key] = value
		levels, kind = int(fields['levels']), fields['kind']
	except (KeyError, ValueError):
		raise FormatError("stack.txt in {} is malformed".format(args.input), 0)

	details = [load_tensor(os.path.join(args.input, 'detail_{}.mrtf'.format(s))).data
		for s in range(1, levels)]
	base = load_tensor(os.path.join(args.input, 'base_{}.mrtf'.format(levels))).data

	x = compose(ResolutionStack(details, base, kind))
	save_image(args.out, x)
	print("wrote {}".format(args.out))

def _level(value):
	if value == 'all':
		return value
	try:
		level = int(value)
	except ValueError:
		raise argparse.ArgumentTypeError("expected a level number or 'all'")
	if level < 1:
		raise argparse.ArgumentTypeError("levels start at 1")
	return level

def build_parser():
	parser = argparse.ArgumentParser(prog='mrflow', description="Train, evaluate "
		"and sample multi-resolution continuous normalizing flows.")
	parser.add_argument('--quiet', action='store_true',
		help="only log warnings and errors")
	commands = parser.add_subparsers(dest='command')
	commands.required = True

	p = commands.add_parser('train', help="train one or all levels")
	p.add_argument('--config', default=None)
	p.add_argument('--data', required=True, help="a directory or builtin:NAME")
	p.add_argument('--level', type=_level, default='all')
	p.add_argument('--out', required=True)
	p.add_argument('--resume', action='store_true')
	p.add_argument('--jobs', type=int, default=None)
	p.set_defaults(func=train)

	p = commands.add_parser('bpd', help="bits per dimension of a data set")
	p.add_argument('--ckpt', required=True)
	p.add_argument('--data', required=True)
	p.add_argument('--count', type=int, default=128)
	p.add_argument('--seed', type=int, default=0)
	p.add_argument('--out', default='.')
	p.set_defaults(func=bpd)

	p = commands.add_parser('generate', help="sample images")
	p.add_argument('--ckpt', required=True)
	p.add_argument('--num', type=int, default=16)
	p.add_argument('--temperature', type=float, default=1.)
	p.add_argument('--seed', type=int, default=0)
	p.add_argument('--out', required=True)
	p.set_defaults(func=generate)

	p = commands.add_parser('superres', help="generate the finer levels of an image")
	p.add_argument('--ckpt', required=True)
	p.add_argument('--input', required=True)
	p.add_argument('--from-level', type=int, required=True)
	p.add_argument('--to-level', type=int, default=1)
	p.add_argument('--temperature', type=float, default=1.)
	p.add_argument('--seed', type=int, default=0)
	p.add_argument('--out', required=True)
	p.set_defaults(func=superres)

	p = commands.add_parser('ood', help="out-of-distribution scores and auROC")
	p.add_argument('--ckpt', required=True)
	p.add_argument('--in-data', required=True)
	p.add_argument('--ood-data', required=True)
	p.add_argument('--detector', nargs='+', choices=DETECTORS, default=list(DETECTORS))
	p.add_argument('--count', type=int, default=128)
	p.add_argument('--out', required=True)
	p.set_defaults(func=ood)

	p = commands.add_parser('shuffle', help="bpd of images with shuffled patches")
	p.add_argument('--ckpt', required=True)
	p.add_argument('--data', required=True)
	p.add_argument('--sizes', type=int, nargs='+', default=None)
	p.add_argument('--count', type=int, default=128)
	p.add_argument('--seed', type=int, default=0)
	p.add_argument('--out', required=True)
	p.set_defaults(func=shuffle)

	p = commands.add_parser('decompose', help="split an image into resolutions")
	p.add_argument('--input', required=True)
	p.add_argument('--levels', type=int, required=True)
	p.add_argument('--transform', choices=('unimodular', 'haar'), default='unimodular')
	p.add_argument('--out', required=True)
	p.set_defaults(func=decompose_command)

	p = commands.add_parser('compose', help="rebuild an image from decompose output")
	p.add_argument('--input', required=True)
	p.add_argument('--out', required=True)
	p.set_defaults(func=compose_command)

	return parser

def main(argv=None):
	args = build_parser().parse_args(argv)
	logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
		format="%(levelname)s %(name)s: %(message)s")

	try:
		args.func(args)
	except DivergenceError as error:
		print("error: {}".format(error), file=sys.stderr)
		return EXIT_DIVERGED
	except (ConfigError, FormatError, DimensionError, ContractError, OSError) as error:
		print("error: {}".format(error), file=sys.stderr)
		return EXIT_USAGE

	return 0
