"""Anonymous delegation of aggregation tasks over onion routes built from
gossip-sampled peers, with a deterministic simulator and an adversary
harness for measuring the anonymity it provides."""

from .config import ScenarioConfig, load_config, parse_config
from .node import Network, Params, Peer
from .scenario import ScenarioResult, run_scenario

__all__ = [
    "Network",
    "Params",
    "Peer",
    "ScenarioConfig",
    "ScenarioResult",
    "load_config",
    "parse_config",
    "run_scenario",
]
__version__ = "0.1.0"
