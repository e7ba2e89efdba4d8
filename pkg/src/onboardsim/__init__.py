"""onboardsim: simulate music-onboarding preference elicitation end to end.

Builds a synthetic ground-truth world, collects onboarding logs under
behavior policies, trains generative user models on those logs, replays
unseen policies against the trained models through a production-style
service layer, and reports the evaluation metrics.
"""

__version__ = "0.1.0"
