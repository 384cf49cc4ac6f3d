# errors.py

"""
The exceptions raised by mrflow. Each one also derives from the builtin
exception that a caller would naturally catch, so code that only knows about
ValueError or ArithmeticError keeps working.
"""

class MrflowError(Exception):
	"""The root of all mrflow errors."""

	pass

class DimensionError(MrflowError, ValueError):
	"""A shape, extent or channel count does not match what is required."""

	pass

class ContractError(MrflowError, ValueError):
	"""A precondition of an operation was violated."""

	pass

class DivergenceError(MrflowError, ArithmeticError):
	"""The state of an integration became non-finite or exploded.

	Parameters
	----------
	message : str
		A description of the failure.

	step : int or None
		The index of the solver step at which the failure was detected.
	"""

	def __init__(self, message, step=None):
		self.step = step
		if step is not None:
			message = "{} (step {})".format(message, step)

		super(DivergenceError, self).__init__(message)

class TrainingDivergedError(DivergenceError):
	"""Training of one level diverged. The parameters of that level have
	been restored to the last good epoch before this is raised.
	"""

	def __init__(self, message, level, log, step=None):
		self.level = level
		self.log = log
		super(TrainingDivergedError, self).__init__(message, step)

class FormatError(MrflowError, ValueError):
	"""Malformed bytes in a tensor, checkpoint or image file."""

	def __init__(self, message, offset=0):
		self.offset = offset
		super(FormatError, self).__init__("{} at byte offset {}".format(
			message, offset))

class ConfigError(MrflowError, ValueError):
	"""An invalid configuration file or value."""

	def __init__(self, message, line=None):
		self.line = line
		if line is not None:
			message = "line {}: {}".format(line, message)

		super(ConfigError, self).__init__(message)
