import math
import numpy
import pytest

from mrflow.tensor import Tape
from mrflow.tensor import Tensor
from mrflow.tensor import check_gradient
from mrflow.multires import C
from mrflow.multires import TransformMatrix
from mrflow.multires import NoiseSchedule
from mrflow.multires import ResolutionStack
from mrflow.multires import downsample_avg
from mrflow.multires import patch_split
from mrflow.multires import patch_merge
from mrflow.multires import decompose
from mrflow.multires import compose
from mrflow.multires import noise_variance

from mrflow.errors import ContractError
from mrflow.errors import DimensionError

from numpy.testing import assert_array_equal
from numpy.testing import assert_array_almost_equal
from numpy.testing import assert_allclose
from numpy.testing import assert_almost_equal

numpy.random.seed(0)
X = numpy.random.uniform(0, 1, size=(3, 16, 16))
X_batch = numpy.random.uniform(0, 1, size=(4, 3, 32, 32))
patch = numpy.array([[[1., 2.], [3., 4.]]])


def test_matrix_inverse():
	for kind in ('unimodular', 'haar'):
		matrix = TransformMatrix(kind)
		assert_array_almost_equal(matrix.forward.dot(matrix.inverse), numpy.eye(4),
			decimal=14)
		assert_array_almost_equal(matrix.inverse.dot(matrix.forward), numpy.eye(4),
			decimal=14)
		assert_array_equal(matrix.inverse[3], [0.25, 0.25, 0.25, 0.25])

def test_matrix_determinant():
	matrix = TransformMatrix('unimodular')
	assert abs(abs(numpy.linalg.det(matrix.forward)) - 1.) < 1e-12
	assert matrix.log_abs_det_inverse == 0.

	matrix = TransformMatrix('haar')
	assert_almost_equal(abs(numpy.linalg.det(matrix.inverse)), 0.5, decimal=12)
	assert_almost_equal(matrix.log_abs_det_inverse, math.log(0.5), decimal=14)

def test_matrix_columns_orthogonal():
	gram = TransformMatrix('unimodular').forward.T.dot(TransformMatrix('unimodular').forward)
	assert_array_almost_equal(gram - numpy.diag(numpy.diag(gram)), numpy.zeros((4, 4)),
		decimal=14)

def test_bad_kind():
	with pytest.raises(ContractError):
		TransformMatrix('daubechies')

	with pytest.raises(ContractError):
		patch_split(patch, 'daubechies')

def test_downsample_avg():
	assert_array_equal(downsample_avg(patch), [[[2.5]]])
	assert_array_equal(downsample_avg(numpy.full((2, 4, 4), 0.7)),
		numpy.full((2, 2, 2), 0.7))
	assert downsample_avg(X).shape == (3, 8, 8)

	with pytest.raises(DimensionError):
		downsample_avg(numpy.zeros((1, 3, 4)))

def test_patch_split_unimodular():
	y, x_bar = patch_split(patch)
	assert y.shape == (3, 1, 1)
	assert_array_almost_equal(y.ravel(), [-2.5198421, -1.2599210, 0.], decimal=7)
	assert_array_equal(x_bar, [[[2.5]]])

def test_patch_split_haar():
	y, x_bar = patch_split(patch, 'haar')
	assert_array_equal(y.ravel(), [-2., -1., 0.])
	assert_array_equal(x_bar, [[[2.5]]])

def test_patch_split_constant():
	y, x_bar = patch_split(numpy.full((3, 4, 4), 0.3))
	assert_array_equal(y, numpy.zeros((9, 2, 2)))
	assert_array_almost_equal(x_bar, numpy.full((3, 2, 2), 0.3), decimal=15)

def test_patch_merge_inverts_split():
	for kind in ('unimodular', 'haar'):
		y, x_bar = patch_split(X, kind)
		assert_allclose(patch_merge(y, x_bar, kind), X, atol=1e-12)

		y, x_bar = patch_split(X_batch, kind)
		assert y.shape == (4, 9, 16, 16)
		assert_allclose(patch_merge(y, x_bar, kind), X_batch, atol=1e-12)

def test_many_patches_roundtrip():
	x = numpy.random.RandomState(3).normal(0, 1, size=(1, 200, 200))
	for kind in ('unimodular', 'haar'):
		y, x_bar = patch_split(x, kind)
		assert numpy.abs(patch_merge(y, x_bar, kind) - x).max() < 1e-9

def test_patch_merge_shape_mismatch():
	y, x_bar = patch_split(X)
	with pytest.raises(DimensionError):
		patch_merge(y[:6], x_bar)

	with pytest.raises(DimensionError):
		patch_merge(y, x_bar[:, :4])

def test_tensor_in_tensor_out():
	y, x_bar = patch_split(Tensor(X))
	assert isinstance(y, Tensor)
	assert isinstance(x_bar, Tensor)
	assert isinstance(patch_merge(y, x_bar), Tensor)
	assert isinstance(downsample_avg(Tensor(X)), Tensor)

def test_decompose_single_level():
	stack = decompose(X, 1)
	assert stack.levels == 1
	assert stack.details == []
	assert_array_equal(stack.base, X)
	assert stack.logdet_total == 0.
	assert_array_equal(compose(stack), X)

def test_decompose_shapes():
	stack = decompose(X_batch[0], 3)
	assert stack.levels == 3
	assert stack.shapes == [(9, 16, 16), (9, 8, 8), (3, 8, 8)]

def test_decompose_indivisible():
	with pytest.raises(DimensionError):
		decompose(numpy.zeros((1, 12, 12)), 4)

	with pytest.raises(ContractError):
		decompose(X, 0)

def test_decompose_base_is_average():
	stack = decompose(X, 2)
	assert_array_equal(stack.base, downsample_avg(X))

	stack = decompose(X, 3)
	assert_array_equal(stack.base, downsample_avg(downsample_avg(X)))

def test_decompose_preserves_range():
	stack = decompose(X_batch, 4)
	assert stack.base.min() >= 0.
	assert stack.base.max() <= 1.

def test_compose_inverts_decompose():
	for kind in ('unimodular', 'haar'):
		for levels in (2, 3, 5):
			stack = decompose(X_batch, levels, kind)
			assert_allclose(compose(stack), X_batch, atol=1e-12)

def test_decompose_inverts_compose():
	stack = decompose(X, 3)
	again = decompose(compose(stack), 3)
	for y, z in zip(stack.details, again.details):
		assert_allclose(y, z, atol=1e-12)
	assert_allclose(stack.base, again.base, atol=1e-12)

def test_compose_zero_details():
	details = [numpy.zeros((3, 4, 4)), numpy.zeros((3, 2, 2))]
	stack = ResolutionStack(details, numpy.full((1, 2, 2), 0.4))
	assert_array_almost_equal(compose(stack), numpy.full((1, 8, 8), 0.4), decimal=15)

def test_logdet_total():
	assert decompose(X_batch[0], 2).logdet_total == 0.
	assert_almost_equal(decompose(X_batch[0], 2, 'haar').logdet_total, -532.3368,
		decimal=4)

	n_patches = 16 * 16 * 3
	dense = n_patches * math.log(abs(numpy.linalg.det(TransformMatrix('haar').inverse)))
	assert_almost_equal(decompose(X_batch[0], 2, 'haar').logdet_total, dense,
		decimal=8)

def test_stack_shape_check():
	with pytest.raises(DimensionError):
		ResolutionStack([numpy.zeros((3, 4, 4)), numpy.zeros((3, 4, 4))],
			numpy.zeros((1, 4, 4)))

def test_noise_variance_values():
	schedule = NoiseSchedule(2)
	assert_almost_equal(schedule.variance(1, 'detail'), 1.5874011, decimal=7)
	assert_almost_equal(schedule.variance(1, 'detail'), C, decimal=14)
	assert schedule.variance(2, 'base') == 0.25

	schedule = NoiseSchedule(3, kind='haar')
	assert schedule.variance(1, 'detail') == 1.
	assert schedule.variance(2, 'detail') == 0.25
	assert schedule.variance(3, 'base') == 0.0625

def test_noise_variance_disabled():
	schedule = NoiseSchedule(3, enabled=False)
	for level, role, variance in schedule.variances():
		assert variance == 1.

def test_noise_variance_offset():
	grown = NoiseSchedule(3, finest_offset=1)
	original = NoiseSchedule(2)
	assert grown.variance(2, 'detail') == original.variance(1, 'detail')
	assert grown.variance(3, 'base') == original.variance(2, 'base')

def test_noise_variance_errors():
	schedule = NoiseSchedule(2)
	with pytest.raises(ContractError):
		noise_variance(schedule, 3, 'detail')

	with pytest.raises(ContractError):
		noise_variance(schedule, 0, 'base')

	with pytest.raises(ContractError):
		noise_variance(schedule, 1, 'coarse')

	with pytest.raises(ContractError):
		NoiseSchedule(0)

def test_noise_pushforward():
	noise = numpy.random.RandomState(0).standard_normal((100000, 1, 4, 4))
	schedule = NoiseSchedule(3)
	stack = decompose(noise, 3)

	for level, y in enumerate(stack.details, 1):
		assert_allclose(y.var(), schedule.variance(level, 'detail'), rtol=0.02)
	assert_allclose(stack.base.var(), schedule.variance(3, 'base'), rtol=0.02)

def test_patch_split_gradient():
	rng = numpy.random.RandomState(4)
	x = rng.normal(size=(2, 1, 4, 4))
	w_y, w_bar = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 1, 2, 2))

	for kind in ('unimodular', 'haar'):
		def loss(t):
			y, x_bar = patch_split(t, kind)
			return (y * Tensor(w_y)).sum() + (x_bar * Tensor(w_bar)).sum()

		analytic, numeric = check_gradient(loss, [x])
		assert_allclose(analytic[0], numeric[0], atol=1e-8)

def test_patch_merge_gradient():
	rng = numpy.random.RandomState(5)
	y, x_bar = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 1, 2, 2))
	w = rng.normal(size=(2, 1, 4, 4))

	for kind in ('unimodular', 'haar'):
		def loss(a, b):
			return (patch_merge(a, b, kind) * Tensor(w)).sum()

		analytic, numeric = check_gradient(loss, [y, x_bar])
		for a, n in zip(analytic, numeric):
			assert_allclose(a, n, atol=1e-8)

def test_downsample_gradient():
	x = numpy.random.RandomState(6).normal(size=(1, 4, 4))
	analytic, _ = check_gradient(lambda t: downsample_avg(t).sum(), [x])
	assert_array_equal(analytic[0], numpy.full((1, 4, 4), 0.25))

def test_merge_of_split_gradient_is_identity():
	x = Tensor(numpy.random.RandomState(7).normal(size=(1, 4, 4)), requires_grad=True)
	with Tape() as tape:
		y, x_bar = patch_split(x)
		loss = patch_merge(y, x_bar).sum()
	tape.backward(loss)
	assert_allclose(x.grad, numpy.ones((1, 4, 4)), atol=1e-14)

def test_patch_merge_mixed_inputs():
	y, x_bar = patch_split(X)
	assert isinstance(patch_merge(Tensor(y), x_bar), Tensor)
	assert_allclose(patch_merge(y, Tensor(x_bar)).data, X, atol=1e-12)
