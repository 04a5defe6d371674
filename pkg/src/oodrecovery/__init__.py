"""Out-of-distribution recovery for reinforcement-learning agents.

A language model describes the OOD state, reasons about the recovery
behavior and writes a dense reward program plus a valid-state program; SAC
then retrains the original policy with reward switching and policy
consolidation in valid states.
"""

__version__ = "0.1.0"
