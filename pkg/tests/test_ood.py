import csv
import math
import numpy
import pytest

from sklearn.metrics import roc_auc_score

from mrflow.ood import COMPRESSOR
from mrflow.ood import complexity
from mrflow.ood import auroc
from mrflow.ood import OodScore
from mrflow.ood import ShuffleStudy
from mrflow.ood import ood_report
from mrflow.ood import patch_sizes
from mrflow.ood import shuffle_study
from mrflow.dataio import make_builtin
from mrflow.mrcnf import MrcnfModel

from mrflow.errors import ContractError
from mrflow.errors import DimensionError

from numpy.testing import assert_allclose

numpy.random.seed(0)
X_in = make_builtin('two_gaussians', 12, 1, 4, 0)
X_ood = make_builtin('uniform_noise', 10, 1, 4, 1)


class LabelOracle(object):
	"""Scores the out-of-distribution images worse than all others."""

	def bpd(self, X):
		return numpy.array([10. if any(numpy.array_equal(image, other) for other in X_ood)
			else 1. for image in X])


class CenteredBpd(object):
	"""The bpd of a model at the pixel cell centers, free of dequantization
	noise."""

	def __init__(self, model):
		self.model = model

	def bpd(self, X):
		logp = self.model.log_likelihood((X + 0.5) / 256.)[0]
		return -logp / (self.model.dims * math.log(2)) + 8.


def test_complexity_constant():
	image = numpy.full((3, 32, 32), 117, dtype='uint8')
	assert complexity(image) < 0.5

def test_complexity_noise():
	image = numpy.random.RandomState(0).randint(0, 256, size=(3, 32, 32)).astype('uint8')
	assert complexity(image) > 7.9

def test_complexity_errors():
	with pytest.raises(ContractError):
		complexity(numpy.zeros((1, 4, 4)))

	with pytest.raises(DimensionError):
		complexity(numpy.zeros((0,), dtype='uint8'))

def test_auroc_values():
	assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.
	assert auroc([0.5], [0.5]) == 0.5
	assert auroc([1., 0.], [1., 0.]) == 0.5
	assert auroc([0.1], [0.9]) == 0.

def test_auroc_symmetry():
	rng = numpy.random.RandomState(1)
	a, b = rng.normal(size=20), rng.normal(0.5, 1., size=30)
	assert_allclose(auroc(a, b) + auroc(b, a), 1., rtol=1e-12)

def test_auroc_monotone_invariance():
	rng = numpy.random.RandomState(2)
	a, b = rng.normal(size=20), rng.normal(0.5, 1., size=30)
	assert auroc(a, b) == auroc(numpy.exp(a), numpy.exp(b))

def test_auroc_matches_sklearn():
	rng = numpy.random.RandomState(3)
	pos, neg = rng.randint(0, 5, size=40), rng.randint(1, 6, size=25)
	labels = numpy.concatenate([numpy.ones(40), numpy.zeros(25)])
	scores = numpy.concatenate([pos, neg])
	assert_allclose(auroc(pos, neg), roc_auc_score(labels, scores), rtol=1e-12)

def test_auroc_empty():
	with pytest.raises(ContractError):
		auroc([], [1.])

	with pytest.raises(ContractError):
		auroc([1.], [])

def test_ood_score():
	score = OodScore('in', 3, 4.25, 1.5)
	assert score.S == 4.25 - 1.5
	assert score.score('neg_bpd') == -4.25
	assert score.score('s_score') == -(4.25 - 1.5)

	with pytest.raises(ContractError):
		score.score('likelihood_ratio')

def test_report_oracle():
	report = ood_report(LabelOracle(), X_in, X_ood)
	assert report.auroc['neg_bpd'] == 1.
	assert len(report.rows) == 22
	assert report.rows[0].dataset == 'in'
	assert report.rows[-1].dataset == 'ood'

	edges, in_counts, ood_counts = report.histograms['neg_bpd']
	assert len(edges) == 101
	assert in_counts.sum() == 12
	assert ood_counts.sum() == 10

def test_report_same_data():
	model = MrcnfModel(1, 1, 4, hidden=4, blocks=1)
	report = ood_report(model, X_in, X_in)
	assert report.auroc['neg_bpd'] == 0.5
	assert report.auroc['s_score'] == 0.5

def test_report_detectors():
	report = ood_report(LabelOracle(), X_in, X_ood, detectors='s_score', bins=10)
	assert list(report.auroc) == ['s_score']
	assert len(report.histograms['s_score'][0]) == 11

	with pytest.raises(ContractError):
		ood_report(LabelOracle(), X_in, X_ood, detectors=('neg_bpd', 'typicality'))

	with pytest.raises(ContractError):
		ood_report(LabelOracle(), X_in[:0], X_ood)

def test_report_csv(tmp_path):
	report = ood_report(LabelOracle(), X_in, X_ood)
	report.write_csv(str(tmp_path))

	with open(str(tmp_path / 'ood_scores.csv')) as infile:
		assert infile.readline() == '# compressor={}\n'.format(COMPRESSOR)
		rows = list(csv.DictReader(infile))
	assert len(rows) == 22
	for row in rows:
		assert float(row['S']) == float(row['bpd']) - float(row['L'])

	with open(str(tmp_path / 'ood_auroc.csv')) as infile:
		rows = list(csv.DictReader(infile))
	assert [row['detector'] for row in rows] == ['neg_bpd', 's_score']
	assert float(rows[0]['auROC']) == 1.

	with open(str(tmp_path / 'ood_hist.csv')) as infile:
		rows = list(csv.DictReader(infile))
	assert len(rows) == 200
	assert sum(int(row['in_count']) for row in rows) == 24

def test_patch_sizes():
	assert patch_sizes(8, 8) == [1, 2, 4, 8]
	assert patch_sizes(12, 12) == [1, 2, 4]
	assert patch_sizes(4, 8) == [1, 2, 4]

def test_shuffle_study_identity_model():
	model = MrcnfModel(2, 1, 4, hidden=4, blocks=1)
	study = shuffle_study(CenteredBpd(model), X_in)
	assert [k for k, _, _ in study.rows] == [1, 2, 4]

	means = [mean for _, mean, _ in study.rows]
	assert_allclose(means, means[0], rtol=1e-10)

def test_shuffle_study_whole_image():
	model = MrcnfModel(1, 1, 4, hidden=4, blocks=1)
	study = shuffle_study(model, X_in, sizes=[4])
	assert study.mean(4) == float(model.bpd(X_in).mean())

	with pytest.raises(KeyError):
		study.mean(2)

def test_shuffle_study_errors():
	with pytest.raises(DimensionError):
		shuffle_study(LabelOracle(), X_in[0])

def test_shuffle_study_monotone(tmp_path):
	assert ShuffleStudy([(1, 9., 0.1), (2, 8., 0.1), (4, 8., 0.1)]).monotone
	assert not ShuffleStudy([(1, 7., 0.1), (2, 8., 0.1)]).monotone

	study = ShuffleStudy([(2, 8., 0.5), (1, 9., 0.25)])
	assert study.rows[0][0] == 1
	study.write_csv(str(tmp_path))

	with open(str(tmp_path / 'shuffle_bpd.csv')) as infile:
		rows = list(csv.reader(infile))
	assert rows[0] == ['patch_size', 'mean_bpd', 'std_bpd']
	assert rows[1] == ['1', '9.0', '0.25']
