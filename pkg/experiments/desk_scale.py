# desk_scale.py

"""
Train small multi-resolution flows on the structured builtin data set and
check them against the uniform baseline of 8 bits per dimension.

A 2-level model and a 1-level model with about as many parameters are
trained on the same 16x16 images. The held-out bpd of both, the bpd of
constant, in-distribution and uniform noise images, the auROC of the two
detectors, and the shuffled patch study are written as CSV files.

The ablation trains the haar and unimodular transforms, each with and
without the multi-resolution noise schedule, at every level count of
--ablation-levels and writes their held-out bpd to ablation_bpd.csv.

Run as `python experiments/desk_scale.py --out results/`.
"""

import os
import csv
import time
import logging
import argparse

from mrflow import MrcnfModel
from mrflow import DatasetSpec
from mrflow import IntegrationSpec
from mrflow import ood_report
from mrflow import shuffle_study
from mrflow.dataio import make_builtin
from mrflow.utils import make_rng

logger = logging.getLogger('desk_scale')

parser = argparse.ArgumentParser()
parser.add_argument('--out', default='desk_scale')
parser.add_argument('--resolution', type=int, default=16)
parser.add_argument('--epochs', type=int, default=10)
parser.add_argument('--hidden', type=int, default=32)
parser.add_argument('--train-count', type=int, default=512)
parser.add_argument('--eval-count', type=int, default=128)
parser.add_argument('--seed', type=int, default=0)
parser.add_argument('--ablation-levels', type=int, nargs='*', default=[2, 3])
args = parser.parse_args()

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
os.makedirs(args.out, exist_ok=True)

X_train = DatasetSpec('builtin:two_gaussians', 'train', args.resolution, 1,
	args.train_count, args.seed).load()
X_eval = DatasetSpec('builtin:two_gaussians', 'eval', args.resolution, 1,
	args.eval_count, args.seed).load()

eval_spec = IntegrationSpec('rk4', steps=16)

def build(levels, hidden, transform='unimodular', noise_schedule=True):
	return MrcnfModel(levels, 1, args.resolution, transform=transform,
		noise_schedule=noise_schedule, hidden=hidden, blocks=2, eval_spec=eval_spec,
		epochs=args.epochs, batch=32, seed=args.seed, n_jobs=levels, verbose=True)

def matched_hidden(target):
	"""The hidden width of a 1-level model closest in size to `target`."""

	sizes = {h: sum(b.n_parameters() for b in build(1, h).blocks)
		for h in range(4, 4 * args.hidden)}
	return min(sizes, key=lambda h: abs(sizes[h] - target))

two_level = build(2, args.hidden)
n_parameters = sum(block.n_parameters() for block in two_level.blocks)
one_level = build(1, matched_hidden(n_parameters))

rows = []
for name, model in (('S=2', two_level), ('S=1', one_level)):
	tic = time.time()
	model.fit(X_train)
	seconds = time.time() - tic

	bpd = model.bpd(X_eval)
	size = sum(block.n_parameters() for block in model.blocks)
	rows.append([name, model.hidden, size, repr(float(bpd.mean())),
		repr(float(bpd.std())), '{:.1f}'.format(seconds)])
	logger.info("%s: held-out bpd %.4f after %.0f s", name, bpd.mean(), seconds)

with open(os.path.join(args.out, 'desk_scale_bpd.csv'), 'w', newline='') as outfile:
	writer = csv.writer(outfile, lineterminator='\n')
	writer.writerow(['model', 'hidden', 'n_parameters', 'mean_bpd', 'std_bpd',
		'train_seconds'])
	writer.writerows(rows)

X_constant = make_builtin('constant', args.eval_count, 1, args.resolution,
	make_rng(args.seed, 3))
X_noise = make_builtin('uniform_noise', args.eval_count, 1, args.resolution,
	make_rng(args.seed, 4))

with open(os.path.join(args.out, 'desk_scale_datasets.csv'), 'w', newline='') as outfile:
	writer = csv.writer(outfile, lineterminator='\n')
	writer.writerow(['data', 'mean_bpd'])
	for name, X in (('constant', X_constant), ('in_distribution', X_eval),
		('uniform_noise', X_noise)):
		writer.writerow([name, repr(float(two_level.bpd(X).mean()))])

report = ood_report(two_level, X_eval, X_noise)
report.write_csv(args.out)

study = shuffle_study(two_level, X_eval, seed=args.seed)
study.write_csv(args.out)
logger.info("shuffle study monotone: %s", study.monotone)

rows = []
for levels in args.ablation_levels:
	for transform in ('haar', 'unimodular'):
		for noise_schedule in (False, True):
			model = build(levels, args.hidden, transform, noise_schedule)
			tic = time.time()
			model.fit(X_train)
			seconds = time.time() - tic

			bpd = model.bpd(X_eval)
			rows.append([levels, transform, 'on' if noise_schedule else 'off',
				sum(block.n_parameters() for block in model.blocks),
				repr(float(bpd.mean())), repr(float(bpd.std())), '{:.1f}'.format(seconds)])
			logger.info("%d levels, %s, noise schedule %s: held-out bpd %.4f", levels,
				transform, rows[-1][2], bpd.mean())

with open(os.path.join(args.out, 'ablation_bpd.csv'), 'w', newline='') as outfile:
	writer = csv.writer(outfile, lineterminator='\n')
	writer.writerow(['levels', 'transform', 'noise_schedule', 'n_parameters',
		'mean_bpd', 'std_bpd', 'train_seconds'])
	writer.writerows(rows)
