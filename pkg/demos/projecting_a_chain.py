"""
Projecting a deterioration chain
================================

A five-class single-step chain, its state distribution over time and the
expected severity class.
"""
import numpy as np

from sewermarkov import Chain, StateVector, TransitionMatrix, expected_severity

# one transition probability per class; class 5 absorbs
P = TransitionMatrix.from_rates([0.045, 0.028, 0.021, 0.012])
print(P.entries)

s0 = StateVector.pristine(5)
chain = Chain(s0, P)

# each step is three years of service
for n in (0, 1, 10, 20, 40):
    probs = chain.project(n).probs
    print(f"year {3 * n:4d}  {np.round(probs, 3)}  E={chain.expectation(n):.3f}")

# the same numbers without the Chain wrapper
print(expected_severity(s0, P, 1))

# a newly built network that already has some damaged pipes
mixed = Chain(StateVector([0.9, 0.1, 0, 0, 0]), P)
print(mixed.path(5).round(4))

# chains serialize to plain JSON
text = chain.to_json()
assert Chain.from_json(text) == chain
print(text)
