"""REST + WebSocket bridge between the MQTT bus and web clients."""

from atms.gateway.app import GatewayConfig, create_app
from atms.gateway.state import GatewayState, TrainSnapshot, UserProfile

__all__ = ["GatewayConfig", "GatewayState", "TrainSnapshot", "UserProfile", "create_app"]
