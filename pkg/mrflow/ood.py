# ood.py

"""
This code implements the likelihood based out-of-distribution analysis: the
complexity of an image as its compressed size, the complexity adjusted
score S = bpd - L, the area under the ROC curve of a detector, histograms
of the scores, and the study of likelihood under shuffled image patches.

Detector scores are oriented so that larger means more in-distribution:
'neg_bpd' scores an image by -bpd and 's_score' by -S. In-distribution
images are the positives of the ROC curve.
"""

import os
import csv
import zlib
import logging

import numpy

from scipy.stats import rankdata

from .utils import make_rng
from .dataio import shuffle_patches
from .errors import ContractError
from .errors import DimensionError

logger = logging.getLogger(__name__)

COMPRESSOR = 'deflate-9'
DETECTORS = ('neg_bpd', 's_score')


def complexity(x):
	"""Bits per dimension of the raw pixel buffer compressed with deflate at
	level 9.

	Parameters
	----------
	x : numpy.ndarray, dtype=uint8
		One image.

	Returns
	-------
	L : float
	"""

	x = numpy.asarray(x)
	if x.dtype != numpy.uint8:
		raise ContractError("complexity needs an 8-bit image (dtype uint8).")
	if x.size == 0:
		raise DimensionError("complexity needs a non-empty image.")

	compressor = zlib.compressobj(9, zlib.DEFLATED, -15)
	payload = compressor.compress(numpy.ascontiguousarray(x).tobytes())
	payload += compressor.flush()
	return 8. * len(payload) / x.size

def auroc(pos_scores, neg_scores):
	"""The area under the ROC curve, P(pos > neg) + P(pos = neg) / 2.

	This is the Mann-Whitney U statistic of the positives normalized by the
	number of pairs, with ties given their midrank.

	Parameters
	----------
	pos_scores, neg_scores : array-like
		Non-empty lists of scores.

	Returns
	-------
	auroc : float
	"""

	pos = numpy.asarray(pos_scores, dtype='float64').ravel()
	neg = numpy.asarray(neg_scores, dtype='float64').ravel()
	if pos.size == 0 or neg.size == 0:
		raise ContractError("auroc needs at least one positive and one negative "
			"score.")

	ranks = rankdata(numpy.concatenate([pos, neg]))
	n_pos, n_neg = pos.size, neg.size
	u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.
	return float(u / (n_pos * n_neg))


class OodScore(object):
	"""The scores of one image.

	Attributes
	----------
	bpd : float
		Bits per dimension under the model.

	L : float
		The complexity in bits per dimension.

	S : float
		bpd - L.
	"""

	__slots__ = ('dataset', 'image_id', 'bpd', 'L', 'S')

	def __init__(self, dataset, image_id, bpd, L):
		self.dataset = dataset
		self.image_id = image_id
		self.bpd = float(bpd)
		self.L = float(L)
		self.S = self.bpd - self.L

	def __repr__(self):
		return "OodScore({!r}, {}, bpd={:.4f}, L={:.4f}, S={:.4f})".format(
			self.dataset, self.image_id, self.bpd, self.L, self.S)

	def score(self, detector):
		if detector == 'neg_bpd':
			return -self.bpd
		if detector == 's_score':
			return -self.S

		raise ContractError("detector must be one of {}, got {!r}".format(
			DETECTORS, detector))


class OodReport(object):
	"""The per-image scores of two data sets and the auROC of each detector.

	Attributes
	----------
	rows : list of OodScore
		The in-distribution images first, labeled 'in', then the others,
		labeled 'ood'.

	auroc : dict
		detector -> auROC.

	histograms : dict
		detector -> (edges, in_counts, ood_counts) over the pooled range of
		the detector scores.
	"""

	def __init__(self, rows, detectors, bins=100):
		self.rows = list(rows)
		self.detectors = tuple(detectors)
		self.bins = bins
		self.auroc = {}
		self.histograms = {}

		for detector in self.detectors:
			pos = self.scores('in', detector)
			neg = self.scores('ood', detector)
			self.auroc[detector] = auroc(pos, neg)
			self.histograms[detector] = _histogram(pos, neg, bins)

	def scores(self, dataset, detector):
		return numpy.array([row.score(detector) for row in self.rows
			if row.dataset == dataset])

	def write_csv(self, directory):
		"""Write ood_scores.csv, ood_auroc.csv and ood_hist.csv."""

		os.makedirs(directory, exist_ok=True)

		with open(os.path.join(directory, 'ood_scores.csv'), 'w', newline='') as outfile:
			outfile.write('# compressor={}\n'.format(COMPRESSOR))
			writer = csv.writer(outfile, lineterminator='\n')
			writer.writerow(['dataset', 'image_id', 'bpd', 'L', 'S'])
			for row in self.rows:
				writer.writerow([row.dataset, row.image_id, repr(row.bpd), repr(row.L),
					repr(row.S)])

		with open(os.path.join(directory, 'ood_auroc.csv'), 'w', newline='') as outfile:
			writer = csv.writer(outfile, lineterminator='\n')
			writer.writerow(['detector', 'auROC'])
			for detector in self.detectors:
				writer.writerow([detector, repr(self.auroc[detector])])

		with open(os.path.join(directory, 'ood_hist.csv'), 'w', newline='') as outfile:
			writer = csv.writer(outfile, lineterminator='\n')
			writer.writerow(['detector', 'bin_left', 'bin_right', 'in_count',
				'ood_count'])
			for detector in self.detectors:
				edges, in_counts, ood_counts = self.histograms[detector]
				for i in range(len(in_counts)):
					writer.writerow([detector, repr(float(edges[i])),
						repr(float(edges[i + 1])), int(in_counts[i]), int(ood_counts[i])])

def _histogram(pos, neg, bins):
	pooled = numpy.concatenate([pos, neg])
	low, high = float(pooled.min()), float(pooled.max())
	if low == high:
		low, high = low - 0.5, high + 0.5

	edges = numpy.linspace(low, high, bins + 1)
	return (edges, numpy.histogram(pos, edges)[0], numpy.histogram(neg, edges)[0])

def _check_detectors(detectors):
	if isinstance(detectors, str):
		detectors = (detectors,)
	for detector in detectors:
		if detector not in DETECTORS:
			raise ContractError("detector must be one of {}, got {!r}".format(
				DETECTORS, detector))
	return tuple(detectors)

def ood_report(model, in_data, ood_data, detectors=DETECTORS, bins=100):
	"""Score two data sets with a model and compare them.

	Parameters
	----------
	model : object
		Anything with a bpd(X) method returning one value per image, such as
		an MrcnfModel.

	in_data, ood_data : numpy.ndarray, shape=(n, C, H, W), dtype=uint8
		The in-distribution and the out-of-distribution images.

	detectors : str or tuple of str
		'neg_bpd', 's_score' or both.

	bins : int
		The number of histogram bins.

	Returns
	-------
	report : OodReport
	"""

	detectors = _check_detectors(detectors)
	if len(in_data) == 0 or len(ood_data) == 0:
		raise ContractError("both data sets must hold at least one image.")

	rows = []
	for dataset, X in (('in', in_data), ('ood', ood_data)):
		X = numpy.asarray(X)
		bpd = numpy.asarray(model.bpd(X), dtype='float64')
		for i in range(X.shape[0]):
			rows.append(OodScore(dataset, i, bpd[i], complexity(X[i])))

	report = OodReport(rows, detectors, bins)
	for detector in detectors:
		logger.info("auROC of %s: %.4f", detector, report.auroc[detector])
	return report


class ShuffleStudy(object):
	"""Mean and standard deviation of the bpd of images whose k x k patches
	were shuffled, for every patch size k.

	Attributes
	----------
	rows : list of (int, float, float)
		(patch_size, mean_bpd, std_bpd), in increasing patch size.

	monotone : bool
		Whether the mean bpd never increases with the patch size.
	"""

	def __init__(self, rows):
		self.rows = sorted(rows)
		means = [mean for _, mean, _ in self.rows]
		self.monotone = all(a >= b for a, b in zip(means, means[1:]))

	def mean(self, patch_size):
		for k, mean, _ in self.rows:
			if k == patch_size:
				return mean
		raise KeyError(patch_size)

	def write_csv(self, directory):
		os.makedirs(directory, exist_ok=True)
		with open(os.path.join(directory, 'shuffle_bpd.csv'), 'w', newline='') as outfile:
			writer = csv.writer(outfile, lineterminator='\n')
			writer.writerow(['patch_size', 'mean_bpd', 'std_bpd'])
			for k, mean, std in self.rows:
				writer.writerow([k, repr(mean), repr(std)])

def patch_sizes(height, width):
	"""1, 2, 4, ... up to the largest power of 2 dividing both extents."""

	sizes, k = [], 1
	while height % k == 0 and width % k == 0 and k <= min(height, width):
		sizes.append(k)
		k *= 2
	return sizes

def shuffle_study(model, X, sizes=None, seed=0):
	"""The bpd of images with shuffled patches for every patch size.

	Parameters
	----------
	model : object
		Anything with a bpd(X) method.

	X : numpy.ndarray, shape=(n, C, H, W), dtype=uint8

	sizes : list of int or None
		Defaults to 1, 2, 4, ... up to H.

	seed : int
		Patches of size k are shuffled with make_rng(seed, k).

	Returns
	-------
	study : ShuffleStudy
	"""

	X = numpy.asarray(X)
	if X.ndim != 4 or X.shape[0] == 0:
		raise DimensionError("shuffle_study needs a non-empty (n, C, H, W) batch.")

	sizes = patch_sizes(*X.shape[2:]) if sizes is None else sizes

	rows = []
	for k in sizes:
		shuffled = shuffle_patches(X, k, make_rng(seed, k))
		bpd = numpy.asarray(model.bpd(shuffled), dtype='float64')
		rows.append((int(k), float(bpd.mean()), float(bpd.std())))
		logger.info("patch size %d: mean bpd %.4f", k, rows[-1][1])

	study = ShuffleStudy(rows)
	if not study.monotone:
		logger.info("mean bpd is not monotone in the patch size")
	return study
