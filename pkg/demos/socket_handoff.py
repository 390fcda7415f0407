"""Send a card between two sessions over a local socket pair.

    python demos/socket_handoff.py
"""

import socket
import threading

from kvhandoff.cachecard import build_card, encode_card
from kvhandoff.errors import HandshakeRejected
from kvhandoff.quantizer import quantize_cache
from kvhandoff.tensorio import SyntheticConfig, generate_synthetic_cache
from kvhandoff.transport import Handshake, Session


def receiver(sock, model_id, out):
    session = Session.over_socket(sock, Handshake("agent1", model_id))
    try:
        session.accept()
        out.append(session.receive_card())
        session.wait_bye()
    except HandshakeRejected as exc:
        out.append(exc)


def handoff(card, receiver_model):
    a, b = socket.socketpair()
    out = []
    t = threading.Thread(target=receiver, args=(b, receiver_model, out))
    t.start()
    sender = Session.over_socket(a, Handshake("agent0", card.model_id))
    try:
        sender.connect()
        sent = sender.send_card(card)
        sender.close()
        result = f"sent {sent} frame bytes in {sender.last_transfer_ms:.3f} ms"
    except HandshakeRejected as exc:
        result = f"rejected: {exc.reason.name}"
    t.join()
    a.close()
    b.close()
    return result, out[0]


def main():
    cache = generate_synthetic_cache(SyntheticConfig(seed=2, tokens=128, head_dim=64))
    card = build_card(quantize_cache(cache, 4), "toy-v1", "agent0")
    result, got = handoff(card, "toy-v1")
    print("same model:", result, "| byte-exact:", encode_card(got) == encode_card(card))
    result, _ = handoff(card, "llama-3.1-8b")
    print("other model:", result)


if __name__ == "__main__":
    main()
