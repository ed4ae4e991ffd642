"""Temporal-logic value compiler for finite MDPs.

Compile normalized temporal objectives into graphs of per-state value
tables, solve them by discounted annealing plus exact recurrence
iteration, and extract switching policies with replayable triggers.
"""

__version__ = "0.1.0"
