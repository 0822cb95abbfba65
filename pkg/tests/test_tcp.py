"""External-tcp connectors against real loopback sockets."""

import json
import socket
import threading
import time

import pytest

from iotbed.config import load_config
from iotbed.tcp import TcpLink
from iotbed.testbed import ProvisionError, provision

from builders import GARAGE, document, small_config


@pytest.fixture
def server():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    srv.settimeout(5)
    yield srv
    srv.close()


def read_line(conn):
    buf = b""
    while not buf.endswith(b"\n"):
        chunk = conn.recv(1)
        if not chunk:
            break
        buf += chunk
    return buf


def wait_for(pred, timeout=5.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if pred():
            return True
        time.sleep(0.01)
    return False


def test_external_provider_streams_formatted_lines(server):
    cfg = small_config()
    cfg["providers"][0]["connector"] = {"kind": "external-tcp", "host": "127.0.0.1",
                                        "port": server.getsockname()[1]}
    cfg["providers"][0]["transformer"] = "csv"
    tb = provision(load_config(document(cfg)), 1)
    conn, _ = server.accept()
    conn.settimeout(5)
    try:
        tb.scheduler.run_until(200)
        assert read_line(conn) == b"temp,temperature,100,21.5\n"
        assert read_line(conn) == b"temp,temperature,200,21.5\n"
        assert tb.last_datapoint["temp"].t == 200
    finally:
        conn.close()
        tb.close()


def test_external_actuator_serves_requests_on_loop(server):
    cfg = small_config(actuators=[{**GARAGE, "connector": {"kind": "external-tcp", "host": "127.0.0.1",
                                                           "port": server.getsockname()[1]}}])
    tb = provision(load_config(document(cfg)), 1)
    conn, _ = server.accept()
    conn.settimeout(5)
    try:
        conn.sendall(b'{"endpoint":"open","fields":{}}\n')
        assert wait_for(lambda: tb.scheduler.drain_submissions() or tb.device_state("door") == "open")
        assert json.loads(read_line(conn)) == {"status": "ok", "state": "open", "data": {"result": "opened"}}
        conn.sendall(b"garbage\n")
        got = None
        end = time.monotonic() + 5
        while got is None and time.monotonic() < end:
            tb.scheduler.drain_submissions()
            conn.settimeout(0.05)
            try:
                got = read_line(conn)
            except socket.timeout:
                pass
        assert json.loads(got)["data"] == {"reason": "malformed"}
    finally:
        conn.close()
        tb.close()


def test_external_connector_unreachable(server):
    port = server.getsockname()[1]
    server.close()
    cfg = small_config()
    cfg["providers"][0]["connector"] = {"kind": "external-tcp", "host": "127.0.0.1", "port": port}
    with pytest.raises(ProvisionError, match="temp"):
        provision(load_config(document(cfg)), 1)


def free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_adapter_slot_forwards_to_connected_peer():
    port = free_port()
    cfg = small_config(adapters=[{"device_id": "slot", "kind": "external-tcp", "host": "127.0.0.1", "port": port}])
    tb = provision(load_config(document(cfg)), 1)
    assert tb.adapters["slot"].state == "waiting"
    peer = socket.create_connection(("127.0.0.1", port), timeout=5)

    def device():
        line = read_line(peer)
        req = json.loads(line)
        # a physical device may interleave telemetry before its reply
        peer.sendall(b'{"device":"slot","label":"lux","t":0,"value":12}\n')
        peer.sendall(json.dumps({"status": "ok", "state": "on", "data": req["fields"]}).encode() + b"\n")

    th = threading.Thread(target=device, daemon=True)
    th.start()
    try:
        assert wait_for(lambda: tb.adapters["slot"].state == "connected")
        got = []
        tb.request("slot", "switch", {"level": 3}, lambda r, t: got.append(r))
        tb.scheduler.run_until(1)
        assert got == [{"status": "ok", "state": "on", "data": {"level": 3}}]
        seen = []
        tb.listeners.append(lambda dp, node: seen.append(dp))
        tb.scheduler.run_until(50)
        tb.pump_external()
        assert [(dp.device, dp.label, dp.t, dp.value) for dp in seen] == [("slot", "lux", 50, 12)]
    finally:
        th.join(5)
        peer.close()
        tb.close()


def test_tcplink_framing_round_trip():
    srv = TcpLink()
    srv.listen("127.0.0.1", 0)
    cli = TcpLink()
    cli.connect(*srv.address)
    try:
        assert wait_for(lambda: srv.connected)
        assert cli.send_line(b"one")
        assert cli.send_line(b"two\n")
        assert srv.frames.get(timeout=5) == b"one"
        assert srv.frames.get(timeout=5) == b"two"
    finally:
        cli.close()
        srv.close()
