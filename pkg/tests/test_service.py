from __future__ import annotations

import random
import socket
import threading

import pytest

from kvcmeta import protocol as wire
from kvcmeta.service import RemoteBackend, TransportError, connect, serve
from kvcmeta.store import BadRangeError, HybridMetaStore, encode_key
from oracle_store import ModelStore

NS = b"svc"


@pytest.fixture
def server():
    store = HybridMetaStore()
    handle = serve(("127.0.0.1", 0), store)
    yield handle, store
    handle.stop()


@pytest.fixture
def remote(server):
    handle, _ = server
    backend = connect(handle.address)
    yield backend
    backend.close()


def test_put_get_round_trip(remote):
    key = encode_key(NS, 1)
    assert remote.put(key, 42) is None
    assert remote.get(key) == 42
    assert remote.put(key, 43) == 42
    assert remote.delete(key) is True
    assert remote.delete(key) is False
    assert remote.get(key) is None


def test_remote_get_equals_inproc_get_for_random_keys(remote, server):
    _, store = server
    rng = random.Random(1)
    keys = [encode_key(NS, rng.randrange(100)) for _ in range(50)]
    for key in keys[::2]:
        remote.put(key, 7)
    local = HybridMetaStore()
    for key in keys[::2]:
        local.put(key, 7)
    for key in keys:
        assert remote.get(key) == local.get(key)


def test_scan_truncation_matches_inproc(remote):
    local = HybridMetaStore()
    for bid in range(20):
        for backend in (remote, local):
            backend.put(encode_key(NS, bid), bid)
    for mx in (None, 0, 3, 25):
        lo, hi = encode_key(NS, 0), encode_key(NS, 20)
        assert remote.scan(lo, hi, max_results=mx) == local.scan(lo, hi, max_results=mx)


def test_scan_bad_range_raises_locally(remote):
    with pytest.raises(BadRangeError):
        remote.scan(encode_key(NS, 5), encode_key(NS, 5))


def test_stats_over_wire(remote):
    key = encode_key(NS, 9)
    remote.put(key, 1)
    remote.get(key)
    remote.get(encode_key(NS, 10))
    stats = remote.stats()
    assert stats.puts == 1
    assert stats.gets == 2
    assert stats.resident_entries == 1


def test_transparency_on_randomized_sequence(remote):
    oracle = ModelStore()
    rng = random.Random(99)
    for _ in range(2_000):
        op = rng.randrange(4)
        bid = rng.randrange(200)
        key = encode_key(NS, bid)
        if op == 0:
            assert remote.put(key, bid) == oracle.put(key, bid)
        elif op == 1:
            assert remote.get(key) == oracle.get(key)
        elif op == 2:
            assert remote.delete(key) == oracle.delete(key)
        else:
            lo, hi = encode_key(NS, bid), encode_key(NS, bid + rng.randrange(1, 16))
            assert remote.scan(lo, hi, max_results=8) == oracle.scan(lo, hi, max_results=8)


def test_unknown_opcode_bad_request_and_connection_survives(server):
    handle, _ = server
    with socket.create_connection(handle.address, timeout=2.0) as sock:
        sock.sendall(wire.encode_frame(0xFF, b"junk"))
        frame = wire.read_frame(sock)
        assert frame is not None
        opcode, payload = frame
        assert opcode == 0xFF
        assert payload == bytes([wire.ST_BAD_REQUEST])
        # same connection still serves valid requests
        sock.sendall(wire.encode_request(wire.GetRequest(encode_key(NS, 1))))
        opcode, payload = wire.read_frame(sock)
        assert opcode == wire.OP_GET
        assert payload == bytes([wire.ST_NOT_FOUND])


def test_malformed_payload_bad_request_and_connection_survives(server):
    handle, _ = server
    with socket.create_connection(handle.address, timeout=2.0) as sock:
        sock.sendall(wire.encode_frame(wire.OP_GET, b"short"))
        _, payload = wire.read_frame(sock)
        assert payload == bytes([wire.ST_BAD_REQUEST])
        sock.sendall(wire.encode_request(wire.StatsRequest()))
        opcode, payload = wire.read_frame(sock)
        assert opcode == wire.OP_STATS
        assert payload[0] == wire.ST_OK


def test_concurrent_connections_oracle_equivalence(server):
    handle, store = server
    n_workers, n_ops = 4, 2_500
    failures: list[Exception] = []

    def worker(idx: int) -> None:
        # one namespace per connection: per-connection streams stay independent
        ns = f"w{idx}".encode()
        oracle = ModelStore()
        rng = random.Random(1000 + idx)
        try:
            with connect(handle.address, timeout=5.0) as backend:
                for _ in range(n_ops):
                    op = rng.randrange(4)
                    bid = rng.randrange(300)
                    key = encode_key(ns, bid)
                    if op == 0:
                        assert backend.put(key, bid) == oracle.put(key, bid)
                    elif op == 1:
                        assert backend.get(key) == oracle.get(key)
                    elif op == 2:
                        assert backend.delete(key) == oracle.delete(key)
                    else:
                        lo = encode_key(ns, bid)
                        hi = encode_key(ns, bid + 8)
                        assert backend.scan(lo, hi) == oracle.scan(lo, hi)
                # final state per namespace equals the oracle
                full = backend.scan(encode_key(ns, 0), encode_key(ns, 2**64 - 1))
                assert full == oracle.scan(encode_key(ns, 0), encode_key(ns, 2**64 - 1))
        except Exception as exc:  # propagated after join
            failures.append(exc)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(n_workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert not failures


def test_stopped_server_raises_transport_error():
    store = HybridMetaStore()
    handle = serve(("127.0.0.1", 0), store)
    backend = connect(handle.address, timeout=0.5)
    key = encode_key(NS, 1)
    backend.put(key, 1)
    handle.stop()
    with pytest.raises(TransportError):
        for _ in range(3):  # first call may still see the draining socket
            backend.get(key)
    backend.close()


def test_connect_refused_is_transport_error():
    backend = RemoteBackend("127.0.0.1", 1, timeout=0.3)  # port 1: nothing there
    with pytest.raises(TransportError, match="connect"):
        backend.get(encode_key(NS, 1))


def test_connect_endpoint_string():
    with pytest.raises(ValueError, match="host:port"):
        connect("no-port-here")


def test_value_boundaries_over_wire(remote):
    key = encode_key(NS, 2**64 - 1)
    remote.put(key, 2**64 - 1)
    assert remote.get(key) == 2**64 - 1
    key0 = encode_key(NS, 0)
    remote.put(key0, 0)
    assert remote.get(key0) == 0


def test_per_connection_response_order(server):
    handle, _ = server
    # pipeline several requests on one socket; responses must come back in order
    with socket.create_connection(handle.address, timeout=2.0) as sock:
        batch = b""
        for bid in range(10):
            batch += wire.encode_request(wire.PutRequest(encode_key(NS, bid), bid))
        sock.sendall(batch)
        for bid in range(10):
            opcode, payload = wire.read_frame(sock)
            assert opcode == wire.OP_PUT
            resp = wire.decode_response(opcode, payload)
            assert resp.old_value is None  # fresh inserts, ordered
