"""Versioned sample applications, looked up by (app_id, version)."""
from .base import App, AppDescriptor, AppEnv
from .firewall import FirewallV1, FirewallV2, FirewallV3
from .loadbalancer import LoadBalancerV1, LoadBalancerV2
from .routing import RoutingV1, RoutingV2
from .topology import TopologyV1, TopologyV2

REGISTRY = {cls.descriptor.app_id + "@" + cls.descriptor.version: cls for cls in (
    FirewallV1, FirewallV2, FirewallV3,
    TopologyV1, TopologyV2,
    RoutingV1, RoutingV2,
    LoadBalancerV1, LoadBalancerV2,
)}


def app_class(app_id: str, version: str):
    try:
        return REGISTRY[f"{app_id}@{version}"]
    except KeyError:
        raise KeyError(f"no app registered as {app_id}@{version}") from None


def descriptor(app_id: str, version: str) -> AppDescriptor:
    return app_class(app_id, version).descriptor
