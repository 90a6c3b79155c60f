from .client import (
    BudgetExhausted,
    EndpointConfig,
    ProbeError,
    ProbeReport,
    RequestBudget,
    interleave,
    measure_ttft,
    run_probe,
    write_report,
)
from .mock import MockConfig, MockEndpoint
from .stats import (
    DENSE_LIKELY,
    INCONCLUSIVE,
    MOE_LIKELY,
    EPEstimate,
    classify_backend,
    classify_ratio,
    estimate_ep_size,
    r_api_ci,
)
