"""Production-style simulation service with simulated-data isolation."""

from .driver import derive_account_seed, run_campaign
from .service import (
    OPERATIONS, OnboardingService, ServiceError, TestAccount,
    state_sampler_from_model,
)
from .stores import (
    USER_DATA_TEMPLATE, OverlayStore, ProductionStore, canonical_hash,
    is_test_account,
)
from .wire import ServiceClient, ServiceServer, handle_message

__all__ = [
    "OnboardingService", "ServiceError", "TestAccount", "OPERATIONS",
    "ProductionStore", "OverlayStore", "USER_DATA_TEMPLATE",
    "canonical_hash", "is_test_account", "state_sampler_from_model",
    "run_campaign", "derive_account_seed",
    "ServiceServer", "ServiceClient", "handle_message",
]
