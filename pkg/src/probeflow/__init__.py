"""Traffic state estimation from GPS probe traces at city scale.

The pipeline runs in stages: build a road network, match probe traces to
it, infer per-segment travel times from the matched paths, alternate the
two until they agree, estimate origin-destination demand consistent with
the observed times, fill unobserved hours by low-rank completion, and
export volume-over-capacity products.
"""

__version__ = "0.1.0"
