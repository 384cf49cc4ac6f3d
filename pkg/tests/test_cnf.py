import math
import numpy
import pytest

from mrflow.tensor import Tape
from mrflow.tensor import Tensor
from mrflow.odeint import IntegrationSpec
from mrflow.odeint import AugmentedState
from mrflow.odeint import integrate
from mrflow.cnf import gaussian_logp
from mrflow.cnf import DynamicsNet
from mrflow.cnf import TraceEstimator
from mrflow.cnf import CnfBlock

from mrflow.errors import ContractError
from mrflow.errors import DimensionError

from numpy.testing import assert_array_equal
from numpy.testing import assert_allclose
from numpy.testing import assert_almost_equal

numpy.random.seed(0)
X = numpy.random.uniform(-1, 1, size=(3, 2, 4, 4))
V = numpy.random.uniform(-1, 1, size=(2, 2, 2, 2))

exact = TraceEstimator('exact')


def finite_difference_jacobian(net, v, t, h=1e-6):
	n, dims = v.shape[0], v[0].size
	jacobian = numpy.empty((n, dims, dims))
	for i in range(dims):
		shifts = []
		for sign in (1., -1.):
			shifted = v.copy().reshape(n, dims)
			shifted[:, i] += sign * h
			f, _ = net.forward(0, Tensor(shifted.reshape(v.shape)), t)
			shifts.append(f.data.reshape(n, dims))
		jacobian[:, :, i] = (shifts[0] - shifts[1]) / (2 * h)
	return jacobian

def test_gaussian_logp_values():
	assert_almost_equal(gaussian_logp(numpy.zeros(1), 1.).item(), -0.9189385, decimal=7)
	assert_almost_equal(gaussian_logp(numpy.zeros(1), 0.25).item(), -0.2257913,
		decimal=7)
	assert_almost_equal(gaussian_logp(numpy.array([1., -1.]), 1.).item(), -2.8378771,
		decimal=7)

def test_gaussian_logp_batch():
	z = numpy.random.RandomState(1).normal(size=(4, 2, 3))
	logp = gaussian_logp(z, 2., batch=True)
	assert logp.shape == (4,)
	assert_allclose(logp.data.sum(), gaussian_logp(z, 2.).item(), rtol=1e-12)

def test_gaussian_logp_bad_variance():
	with pytest.raises(ContractError):
		gaussian_logp(numpy.zeros(2), 0.)

	with pytest.raises(ContractError):
		gaussian_logp(numpy.zeros(2), -1.)

def test_dynamics_net_parameters():
	net = DynamicsNet((2, 4, 4), cond_channels=1, hidden=5, blocks=2)
	names = [name for name, _ in net.named_parameters()]
	assert len(names) == 16
	assert names[0] == 'piece0.conv0.weight'
	assert net.layer(0, 0)[0].shape == (5, 4, 3, 3)
	assert net.layer(1, 3)[0].shape == (2, 5, 3, 3)
	assert_array_equal(net.layer(1, 3)[0].data, numpy.zeros((2, 5, 3, 3)))

def test_dynamics_net_seeded():
	a = DynamicsNet((2, 4, 4), hidden=4, random_state=3, zero_last=False)
	b = DynamicsNet((2, 4, 4), hidden=4, random_state=3, zero_last=False)
	for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
		assert_array_equal(x.data, y.data)

def test_dynamics_net_errors():
	with pytest.raises(DimensionError):
		DynamicsNet((4, 4))

	with pytest.raises(ContractError):
		DynamicsNet((1, 4, 4), hidden=0)

	with pytest.raises(ContractError):
		DynamicsNet((1, 4, 4), dtype='u8')

def test_jvp_matches_finite_differences():
	net = DynamicsNet((2, 2, 2), hidden=6, random_state=1, zero_last=False)
	jacobian = net.jacobian(0, V, 0.3)
	assert jacobian.shape == (2, 8, 8)
	assert_allclose(jacobian, finite_difference_jacobian(net, V, 0.3), atol=1e-7)

def test_exact_trace():
	net = DynamicsNet((2, 2, 2), hidden=6, random_state=2, zero_last=False)
	jacobian = net.jacobian(0, V, 0.7)
	f, trace, ke, jn = exact.evaluate(net, 0, Tensor(V), 0.7, None)

	assert_allclose(trace.data, numpy.trace(jacobian, axis1=1, axis2=2), atol=1e-12)
	assert_allclose(jn.data, (jacobian ** 2).sum(axis=(1, 2)), rtol=1e-12)
	assert_allclose(ke.data, (f.data ** 2).sum(axis=(1, 2, 3)), rtol=1e-12)

def hutchinson_draws(net, v, noise, count, seed):
	"""count single-noise trace estimates at the point v, one per batch row."""

	estimator = TraceEstimator('hutchinson', noise, samples=1)
	batch = numpy.repeat(v, count, axis=0)
	eps = estimator.draw(batch.shape, seed)
	_, trace, _, _ = estimator.evaluate(net, 0, Tensor(batch), 0.5, None, eps)
	return trace.data, eps

def test_hutchinson_unbiased():
	for seed in range(10):
		net = DynamicsNet((2, 2, 2), hidden=6, random_state=seed, zero_last=False)
		v = V[:1]
		exact_trace = numpy.trace(net.jacobian(0, v, 0.5)[0])

		draws, eps = hutchinson_draws(net, v, 'gaussian', 256, seed)
		se = draws.std(ddof=1) / math.sqrt(256)
		assert abs(draws.mean() - exact_trace) <= 3 * se

		estimator = TraceEstimator('hutchinson', 'gaussian', samples=256)
		_, trace, _, _ = estimator.evaluate(net, 0, Tensor(v), 0.5, None,
			eps.reshape((256, 1) + v.shape[1:]))
		assert_allclose(trace.data[0], draws.mean(), rtol=1e-10, atol=1e-12)

def test_single_sample_hutchinson_unbiased():
	errors = []
	for seed in range(20):
		net = DynamicsNet((2, 2, 2), hidden=6, random_state=100 + seed,
			zero_last=False)
		v = V[1:]
		jacobian = net.jacobian(0, v, 0.5)[0]
		symmetric = (jacobian + jacobian.T) / 2

		draws, _ = hutchinson_draws(net, v, 'gaussian', 1, seed)
		sd = math.sqrt(2 * (symmetric ** 2).sum())
		errors.append((draws[0] - numpy.trace(jacobian)) / sd)

	assert abs(numpy.mean(errors)) <= 3 / math.sqrt(20)

def test_rademacher_variance_below_gaussian():
	gaussian, rademacher = [], []
	expected_gaussian, expected_rademacher = 0., 0.
	for seed in range(20):
		net = DynamicsNet((2, 2, 2), hidden=6, random_state=seed, zero_last=False)
		v = V[:1]
		jacobian = net.jacobian(0, v, 0.5)[0]
		symmetric = (jacobian + jacobian.T) / 2
		expected_gaussian += 2 * (symmetric ** 2).sum()
		expected_rademacher += 2 * ((symmetric ** 2).sum() - (numpy.diag(jacobian) ** 2).sum())

		gaussian.append(hutchinson_draws(net, v, 'gaussian', 2000, seed)[0].var(ddof=1))
		rademacher.append(hutchinson_draws(net, v, 'rademacher', 2000, seed)[0].var(ddof=1))

	assert sum(rademacher) < sum(gaussian)
	assert_allclose(sum(gaussian), expected_gaussian, rtol=0.15)
	assert_allclose(sum(rademacher), expected_rademacher, rtol=0.15)

def test_trace_estimator_draw():
	estimator = TraceEstimator('hutchinson', 'rademacher', samples=3)
	noise = estimator.draw((2, 1, 2, 2), 0)
	assert noise.shape == (3, 2, 1, 2, 2)
	assert set(numpy.unique(noise)) <= {-1., 1.}

	assert_array_equal(estimator.draw((4,), 5), estimator.draw((4,), 5))

def test_trace_estimator_resolve():
	auto = TraceEstimator('auto', exact_max_dims=64)
	assert auto.resolve(64) == 'exact'
	assert auto.resolve(65) == 'hutchinson'
	assert exact.resolve(10 ** 6) == 'exact'

	with pytest.raises(ContractError):
		TraceEstimator('sketch')

	with pytest.raises(ContractError):
		TraceEstimator(noise='uniform')

def test_hutchinson_needs_noise():
	net = DynamicsNet((2, 2, 2), hidden=3)
	with pytest.raises(ContractError):
		TraceEstimator('hutchinson').evaluate(net, 0, Tensor(V), 0., None)

def test_zero_initialized_block_is_identity():
	block = CnfBlock((2, 4, 4), hidden=4)
	z, delta, ke, jn = block.forward_logp(X, rng=0)
	assert_array_equal(z.data, X)
	assert_array_equal(delta.data, numpy.zeros(3))
	assert_array_equal(ke.data, numpy.zeros(3))
	assert_array_equal(jn.data, numpy.zeros(3))
	assert_array_equal(block.inverse(X).data, X)

def test_random_block_regularizers_positive():
	block = CnfBlock((2, 4, 4), hidden=4, random_state=0, zero_last=False)
	_, _, ke, jn = block.forward_logp(X, rng=0, spec=IntegrationSpec('rk4', 2))
	assert numpy.all(ke.data > 0)
	assert numpy.all(jn.data > 0)

def test_change_of_variables():
	for seed in range(20):
		dims, blocks = 2 + seed % 3, 1 + seed % 2
		block = CnfBlock((dims, 1, 1), hidden=8, blocks=blocks, random_state=seed,
			zero_last=False)
		x0 = numpy.random.RandomState(seed).uniform(-1, 1, size=(dims, 1, 1))

		h = 1e-5
		batch = [x0]
		for i in range(dims):
			for sign in (1., -1.):
				shifted = x0.copy()
				shifted[i, 0, 0] += sign * h
				batch.append(shifted)

		z, delta, _, _ = block.forward_logp(numpy.array(batch),
			spec=IntegrationSpec('rk4', 100), trace=exact)
		z = z.data.reshape(2 * dims + 1, dims)
		jacobian = numpy.empty((dims, dims))
		for i in range(dims):
			jacobian[:, i] = (z[1 + 2 * i] - z[2 + 2 * i]) / (2 * h)

		_, logdet = numpy.linalg.slogdet(jacobian)
		assert abs(delta.data[0] - logdet) < 1e-4

def test_euler_single_step_forward():
	block = CnfBlock((2, 4, 4), hidden=4, random_state=4, zero_last=False)
	euler = IntegrationSpec('euler', 1)
	z, _, _, _ = block.forward_logp(X, spec=euler, trace=exact)
	f, _ = block.net.forward(0, Tensor(X), 0.)
	assert_array_equal(z.data, X + f.data)

def test_euler_single_step_inverse():
	block = CnfBlock((2, 4, 4), hidden=4, random_state=4, zero_last=False)
	x = block.inverse(X, spec=IntegrationSpec('euler', 1))
	f, _ = block.net.forward(0, Tensor(X), 1.)
	assert_array_equal(x.data, X - f.data)

def test_inverse_roundtrip():
	block = CnfBlock((2, 4, 4), hidden=4, blocks=2, random_state=5, zero_last=False)
	spec = IntegrationSpec('rk4', 32)
	z, _, _, _ = block.forward_logp(X, spec=spec, trace=exact)
	assert numpy.abs(block.inverse(z, spec=spec).data - X).max() < 1e-5

def test_forward_reverse_logp_cancel():
	block = CnfBlock((2, 2, 2), hidden=4, random_state=6, zero_last=False)
	spec = IntegrationSpec('rk4', 50)
	dynamics = block.dynamics(0, None, exact, 'exact')
	forward = integrate(dynamics, AugmentedState.initial(Tensor(V)), spec, 'forward')
	reverse = integrate(dynamics, AugmentedState.initial(forward.v), spec, 'reverse')
	assert_allclose(forward.dlogp.data + reverse.dlogp.data, numpy.zeros(2), atol=1e-6)

def test_hutchinson_noise_is_seeded():
	block = CnfBlock((2, 4, 4), hidden=4, random_state=7, zero_last=False)
	spec = IntegrationSpec('rk4', 2)
	a = block.forward_logp(X, rng=11, spec=spec)[1].data
	b = block.forward_logp(X, rng=11, spec=spec)[1].data
	c = block.forward_logp(X, rng=12, spec=spec)[1].data
	assert_array_equal(a, b)
	assert not numpy.array_equal(a, c)

def test_unbatched_input():
	block = CnfBlock((2, 4, 4), hidden=4, random_state=8, zero_last=False)
	spec = IntegrationSpec('rk4', 2)
	z, delta, ke, jn = block.forward_logp(X[0], spec=spec, trace=exact)
	assert z.shape == (2, 4, 4)
	assert delta.shape == ()
	assert ke.shape == ()

	batched = block.forward_logp(X[:1], spec=spec, trace=exact)
	assert_allclose(delta.item(), batched[1].data[0], rtol=1e-12)
	assert block.inverse(z, spec=spec).shape == (2, 4, 4)

def test_conditional_block():
	block = CnfBlock((3, 2, 2), cond_shape=(1, 2, 2), hidden=4, random_state=1,
		zero_last=False)
	x = numpy.random.RandomState(2).normal(size=(2, 3, 2, 2))
	cond = numpy.random.RandomState(3).uniform(size=(2, 1, 2, 2))
	spec = IntegrationSpec('rk4', 32)

	z, delta, _, _ = block.forward_logp(x, cond, spec=spec, trace=exact)
	z2, _, _, _ = block.forward_logp(x, cond + 1., spec=spec, trace=exact)
	assert z.shape == x.shape
	assert not numpy.allclose(z.data, z2.data)
	assert numpy.abs(block.inverse(z, cond, spec=spec).data - x).max() < 1e-5

def test_conditioning_contract():
	conditional = CnfBlock((3, 2, 2), cond_shape=(1, 2, 2), hidden=2)
	unconditional = CnfBlock((3, 2, 2), hidden=2)
	x = numpy.zeros((2, 3, 2, 2))

	with pytest.raises(ContractError):
		conditional.forward_logp(x)

	with pytest.raises(ContractError):
		unconditional.forward_logp(x, numpy.zeros((2, 1, 2, 2)))

	with pytest.raises(DimensionError):
		conditional.forward_logp(x, numpy.zeros((2, 1, 4, 4)))

	with pytest.raises(DimensionError):
		unconditional.forward_logp(numpy.zeros((2, 2, 2, 2)))

	with pytest.raises(DimensionError):
		CnfBlock((3, 2, 2), cond_shape=(1, 4, 4))

def test_parameter_gradient():
	block = CnfBlock((2, 2, 2), hidden=3, random_state=9, zero_last=False)
	spec = IntegrationSpec('rk4', 2)

	def loss():
		z, delta, ke, jn = block.forward_logp(V, rng=5, spec=spec)
		nll = -(delta + gaussian_logp(z, 1., batch=True))
		return nll.mean() + ke.mean() * 0.1 + jn.mean() * 0.1

	with Tape() as tape:
		value = loss()
	tape.backward(value)

	h = 1e-6
	for weight in (block.net.layer(0, 0)[0], block.net.layer(0, 3)[1]):
		flat = weight.data.reshape(-1)
		for j in range(0, flat.size, max(1, flat.size // 5)):
			original = flat[j]
			flat[j] = original + h
			upper = loss().item()
			flat[j] = original - h
			lower = loss().item()
			flat[j] = original

			numeric = (upper - lower) / (2 * h)
			assert_allclose(weight.grad.reshape(-1)[j], numeric, rtol=1e-4, atol=1e-8)
