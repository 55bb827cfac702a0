import hypothesis

# one deterministic suite: examples derive from the test body, not a clock
hypothesis.settings.register_profile(
    "odlc", hypothesis.settings(derandomize=True, deadline=None, max_examples=40))
hypothesis.settings.load_profile("odlc")
