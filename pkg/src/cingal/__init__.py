"""Thin-server deployment framework.

Node daemons accept signed bundles of code and data for execution; a
deployment engine enacts declarative architecture descriptions into
running, wired, multi-node component topologies and evolves them by
rewiring and redeployment.
"""

from .bundle import Bundle, Datum, parse_bundle, serialize_bundle
from .channels import Connector
from .engine import DDD, DeploymentRecord, Engine, parse_ddd
from .guid import Guid, compute_guid
from .node import NodeConfig, ThinServer
from .security import generate_keypair, sign_bundle, verify_bundle

__all__ = [
    "Bundle", "Datum", "parse_bundle", "serialize_bundle",
    "Connector", "DDD", "DeploymentRecord", "Engine", "parse_ddd",
    "Guid", "compute_guid", "NodeConfig", "ThinServer",
    "generate_keypair", "sign_bundle", "verify_bundle",
]
