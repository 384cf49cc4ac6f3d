# odeint.py

"""
This code implements fixed-step and adaptive integration of the augmented
state of a continuous normalizing flow: the flow state v, the accumulated
log-density change, and the two regularizer accumulators.

Gradients come from backpropagating through the unrolled solver. Every step
is built from ordinary Tensor operations, so when a Tape is active the whole
integration is recorded and differentiable end to end.
"""

import logging

from collections import namedtuple

import numpy

from .tensor import Tensor
from .errors import ContractError
from .errors import DivergenceError

logger = logging.getLogger(__name__)

METHODS = ('euler', 'rk4', 'adaptive_rk45')
DIVERGENCE_LIMIT = 1e6

# Butcher tableaus: (stage times, stage coefficients, weights)
_EULER = ([0.], [[]], [1.])

_RK4 = ([0., 0.5, 0.5, 1.],
	[[], [0.5], [0., 0.5], [0., 0., 1.]],
	[1. / 6, 1. / 3, 1. / 3, 1. / 6])

# Dormand-Prince 5(4)
_DOPRI5 = ([0., 1. / 5, 3. / 10, 4. / 5, 8. / 9, 1., 1.],
	[[],
	 [1. / 5],
	 [3. / 40, 9. / 40],
	 [44. / 45, -56. / 15, 32. / 9],
	 [19372. / 6561, -25360. / 2187, 64448. / 6561, -212. / 729],
	 [9017. / 3168, -355. / 33, 46732. / 5247, 49. / 176, -5103. / 18656],
	 [35. / 384, 0., 500. / 1113, 125. / 192, -2187. / 6784, 11. / 84]],
	[35. / 384, 0., 500. / 1113, 125. / 192, -2187. / 6784, 11. / 84, 0.])

# Difference between the 5th and the embedded 4th order weights.
_DOPRI5_ERROR = [71. / 57600, 0., -71. / 16695, 71. / 1920, -17253. / 339200,
	22. / 525, -1. / 40]

_TABLEAUS = {'euler': _EULER, 'rk4': _RK4}


class IntegrationSpec(object):
	"""How to integrate a flow over [t0, t1].

	Parameters
	----------
	method : str
		'euler', 'rk4' or 'adaptive_rk45'.

	steps : int
		The number of fixed steps. For the adaptive method the first step is
		(t1 - t0) / steps.

	rtol, atol : float
		Tolerances of the adaptive method.

	t0, t1 : float
		The integration interval, t0 < t1.

	max_steps : int
		The largest number of accepted plus rejected adaptive steps.
	"""

	def __init__(self, method='rk4', steps=8, rtol=1e-5, atol=1e-5, t0=0.,
		t1=1., max_steps=10000):
		if method not in METHODS:
			raise ContractError("method must be one of {}, got {!r}".format(
				METHODS, method))
		if int(steps) != steps or steps < 1:
			raise ContractError("steps must be a positive integer.")
		if rtol <= 0 or atol <= 0:
			raise ContractError("rtol and atol must be positive.")
		if not t0 < t1:
			raise ContractError("t0 must be smaller than t1.")

		self.method = method
		self.steps = int(steps)
		self.rtol = float(rtol)
		self.atol = float(atol)
		self.t0 = float(t0)
		self.t1 = float(t1)
		self.max_steps = int(max_steps)

	def __repr__(self):
		if self.method == 'adaptive_rk45':
			return "IntegrationSpec(method='adaptive_rk45', rtol={}, atol={})".format(
				self.rtol, self.atol)
		return "IntegrationSpec(method={!r}, steps={})".format(self.method,
			self.steps)

	def __eq__(self, other):
		return isinstance(other, IntegrationSpec) and vars(self) == vars(other)


class AugmentedState(namedtuple('AugmentedState', ['v', 'dlogp', 'ke', 'jn'])):
	"""The flow state plus its per-sample accumulators.

	v is a Tensor with the batch on axis 0. dlogp accumulates -int Tr(df/dv)
	dt, ke and jn accumulate the kinetic energy and Jacobian norm of the
	flow. The accumulators have shape (N,).
	"""

	__slots__ = ()

	@classmethod
	def initial(cls, v):
		"""A state at v with all accumulators zero."""

		v = v if isinstance(v, Tensor) else Tensor(v)
		zeros = lambda: Tensor(numpy.zeros(v.shape[0], dtype=v.data.dtype))
		return cls(v, zeros(), zeros(), zeros())


def _combine(state, h, coefficients, derivatives):
	"""state + h * sum(coefficient * derivative), field by field."""

	fields = []
	for i, base in enumerate(state):
		increment = None
		for coefficient, derivative in zip(coefficients, derivatives):
			if coefficient == 0.:
				continue

			term = derivative[i] * coefficient
			increment = term if increment is None else increment + term

		fields.append(base if increment is None else base + increment * h)

	return AugmentedState(*fields)

def _derivative(dynamics, state, t, sign):
	dv, trace, ke, jn = dynamics(state.v, t)
	if not isinstance(dv, Tensor) or dv.shape != state.v.shape:
		raise ContractError("dynamics returned a derivative of shape {} for a "
			"state of shape {}".format(getattr(dv, 'shape', None), state.v.shape))

	# ke and jn are accumulated with |dt|
	return (dv, -trace, ke * sign, jn * sign)

def _rk_step(dynamics, tableau, state, t, h):
	times, coefficients, weights = tableau
	sign = 1. if h > 0 else -1.

	derivatives = []
	for c, a in zip(times, coefficients):
		stage = state if len(a) == 0 else _combine(state, h, a, derivatives)
		derivatives.append(_derivative(dynamics, stage, t + c * h, sign))

	return _combine(state, h, weights, derivatives), derivatives

def _check_finite(state, step):
	v = state.v.data
	if not numpy.all(numpy.isfinite(v)):
		raise DivergenceError("non-finite flow state", step)
	if numpy.abs(v).max(initial=0.) > DIVERGENCE_LIMIT:
		raise DivergenceError("flow state exceeded {:g} in magnitude".format(
			DIVERGENCE_LIMIT), step)

	for name, field in zip(('dlogp', 'ke', 'jn'), state[1:]):
		values = field.data if isinstance(field, Tensor) else numpy.asarray(field)
		if not numpy.all(numpy.isfinite(values)):
			raise DivergenceError("non-finite {} accumulator".format(name), step)

def _values(field):
	return field.data if isinstance(field, Tensor) else numpy.asarray(field)

def _integrate_adaptive(dynamics, state, spec, start, end):
	direction = 1. if end > start else -1.
	t = start
	h = direction * (spec.t1 - spec.t0) / spec.steps
	attempts, accepted = 0, 0

	while direction * (end - t) > 0:
		if attempts >= spec.max_steps:
			raise DivergenceError("adaptive step budget of {} exhausted".format(
				spec.max_steps), accepted)
		attempts += 1

		if direction * (t + h - end) > 0:
			h = end - t

		candidate, derivatives = _rk_step(dynamics, _DOPRI5, state, t, h)

		scale_error = []
		for i in (0, 1):
			error = sum(e * _values(d[i]) for e, d in zip(_DOPRI5_ERROR,
				derivatives) if e != 0.) * h
			y0, y1 = numpy.abs(_values(state[i])), numpy.abs(_values(candidate[i]))
			tolerance = spec.atol + spec.rtol * numpy.maximum(y0, y1)
			scale_error.append(numpy.ravel(error / tolerance))

		scale_error = numpy.concatenate(scale_error)
		error_norm = float(numpy.sqrt(numpy.mean(scale_error ** 2)))

		if not numpy.isfinite(error_norm):
			raise DivergenceError("non-finite local error estimate", accepted)

		if error_norm <= 1.:
			t = end if abs(end - (t + h)) < 1e-12 * abs(h) else t + h
			state = candidate
			_check_finite(state, accepted)
			accepted += 1

		if error_norm == 0.:
			factor = 5.
		else:
			factor = min(5., max(0.2, 0.9 * error_norm ** -0.2))
		h *= factor

	return state

def integrate(dynamics, state0, spec, direction='forward'):
	"""Integrate an augmented state across [t0, t1].

	Parameters
	----------
	dynamics : callable
		Called as dynamics(v, t) and returning (dv, trace, ke_inc, jn_inc):
		the time derivative of v with the shape of v, the estimate of
		Tr(d dv / dv) per sample, and the integrands of the kinetic energy
		and Jacobian norm regularizers. The last three may be Tensors of
		shape (N,) or plain numbers.

	state0 : AugmentedState
		The state at the starting time boundary.

	spec : IntegrationSpec
		The method, steps and tolerances.

	direction : str
		'forward' integrates from t0 to t1, 'reverse' from t1 to t0.

	Returns
	-------
	state : AugmentedState
		The state at the far time boundary.
	"""

	if direction not in ('forward', 'reverse'):
		raise ContractError("direction must be 'forward' or 'reverse'.")

	start, end = (spec.t0, spec.t1) if direction == 'forward' else (spec.t1, spec.t0)

	if spec.method == 'adaptive_rk45':
		return _integrate_adaptive(dynamics, state0, spec, start, end)

	tableau = _TABLEAUS[spec.method]
	h = (end - start) / spec.steps

	state = state0
	for step in range(spec.steps):
		t = start + step * h
		state, _ = _rk_step(dynamics, tableau, state, t, h)
		_check_finite(state, step)

	return state

def roundtrip_error(dynamics, v0, spec):
	"""The largest absolute difference between v0 and the result of
	integrating v0 forward and then back in time.
	"""

	v0 = v0 if isinstance(v0, Tensor) else Tensor(v0)
	forward = integrate(dynamics, AugmentedState.initial(v0), spec, 'forward')
	reverse = integrate(dynamics, AugmentedState.initial(forward.v), spec, 'reverse')
	return float(numpy.abs(reverse.v.data - v0.data).max(initial=0.))
