"""Self-contained MQTT 3.1.1 subset: packet codec, client session, broker.

QoS 0 and 1 only; no wills, auth, QoS 2, or session resumption. The wire
format is byte-exact standard MQTT, so clients interoperate with any
external 3.1.1 broker.
"""

from atms.mqtt.packets import (
    Connack,
    Connect,
    Disconnect,
    MqttDecodeError,
    MqttEncodeError,
    Pingreq,
    Pingresp,
    Puback,
    Publish,
    Suback,
    Subscribe,
    decode,
    encode,
)
from atms.mqtt.broker import BrokerConfig, EmbeddedBroker
from atms.mqtt.client import AckTimeoutError, MqttClient, NotConnectedError, ReliablePublisher

__all__ = [
    "AckTimeoutError",
    "BrokerConfig",
    "Connack",
    "Connect",
    "Disconnect",
    "EmbeddedBroker",
    "MqttClient",
    "MqttDecodeError",
    "MqttEncodeError",
    "NotConnectedError",
    "Pingreq",
    "Pingresp",
    "Puback",
    "Publish",
    "ReliablePublisher",
    "Suback",
    "Subscribe",
    "decode",
    "encode",
]
