import socket

import pytest

from iotbed import devices as dv
from iotbed.config import (
    ConfigError,
    ConfigSyntaxError,
    HubAction,
    config_hash,
    config_names,
    load_config,
    load_configs,
    parse_hub_action,
)
from iotbed.demo import demo_document
from iotbed.netsim import NetworkEvent, UnknownTargetError
from iotbed.testbed import ProvisionError, UnknownDeviceError, hub_dispatch, monitor_snapshot, provision

from builders import document, small_config
from oracles import ref_stream_seed, ref_uniforms


def tb_for(seed=1, **overrides):
    return provision(load_config(document(small_config(**overrides))), seed)


# --- load_config ----------------------------------------------------------


def test_demo4_has_two_simulated_houses():
    cfg = load_config(demo_document(4))
    ids = cfg.device_ids()
    assert any(d.startswith("houseA.") for d in ids) and any(d.startswith("houseB.") for d in ids)
    assert cfg.adapters == []


def test_dangling_node_named():
    cfg = small_config()
    cfg["topology"]["links"].append({"a": "gw", "b": "gw9"})
    with pytest.raises(ConfigError, match="gw9"):
        load_config(document(cfg))


def test_connector_to_unknown_node_named_with_path():
    cfg = small_config()
    cfg["providers"][0]["connector"]["via_node"] = "gw9"
    with pytest.raises(ConfigError) as ei:
        load_config(document(cfg))
    assert "gw9" in str(ei.value)
    assert ei.value.path == "configs[0].providers[0].connector.via_node"


@pytest.mark.parametrize("doc", [b"", b"   \n", b"{not json"])
def test_syntax_errors(doc):
    with pytest.raises(ConfigSyntaxError):
        load_config(doc)


def test_schema_violation_paths():
    cfg = small_config()
    cfg["providers"][0]["period_ms"] = "fast"
    with pytest.raises(ConfigError, match=r"configs\[0\]\.providers\[0\]\.period_ms"):
        load_config(document(cfg))
    cfg = small_config(colour="blue")
    with pytest.raises(ConfigError, match="colour"):
        load_config(document(cfg))


def test_duplicate_device_id():
    cfg = small_config()
    cfg["adapters"].append({"device_id": "temp"})
    with pytest.raises(ConfigError, match="duplicate device id"):
        load_config(document(cfg))


def test_multiple_named_configs():
    doc = document(small_config(name="a"), small_config(name="b", seed=9))
    assert config_names(doc) == ["a", "b"]
    assert load_config(doc, "b").seed == 9
    with pytest.raises(ConfigError):
        load_config(doc)
    with pytest.raises(ConfigError, match="zzz"):
        load_config(doc, "zzz")
    with pytest.raises(ConfigError, match="duplicate config name"):
        load_configs(document(small_config(), small_config()))


def test_config_hash_is_raw_bytes_fnv():
    doc = document()
    assert load_config(doc).config_hash == config_hash(doc)
    assert config_hash(b"") == "cbf29ce484222325"
    assert config_hash(doc + b" ") != config_hash(doc)


def test_hub_action_parsing():
    act = parse_hub_action({"kind": "network-event", "event": {"kind": "set-loss", "link": ["a", "b"], "value": 0.5}})
    assert act.event == NetworkEvent("set-loss", ("a", "b"), 0.5)
    act = parse_hub_action({"kind": "reconfigure-provider", "device_id": "temp",
                            "generator": {"kind": "constant", "value": 99}})
    assert act.generator == dv.Constant(99)
    with pytest.raises(ConfigError):
        parse_hub_action({"kind": "explode"})


# --- provision ------------------------------------------------------------


def test_provision_deterministic_headers():
    cfg = load_config(demo_document(4))
    h1 = provision(cfg, 1).log.header
    h2 = provision(cfg, 1).log.header
    h1.pop("created_wall")
    h2.pop("created_wall")
    assert h1 == h2
    assert h1["seed"] == 1 and h1["config_hash"] == cfg.config_hash


def test_provision_demo2_opens_no_sockets():
    tb = provision(load_config(demo_document(2)), 1)
    assert tb.adapters
    assert all(a.link is None and a.state == "loopback" for a in tb.adapters.values())


def test_fresh_snapshot():
    snap = monitor_snapshot(tb_for())
    assert (snap.sim_time, snap.sent, snap.delivered, snap.dropped) == (0, 0, 0, 0)
    assert snap.devices["door"] == {"kind": "actuator", "state": "closed", "attached": True}
    assert snap.devices["temp"]["sample_index"] == 0


def test_ten_emissions_delivered():
    tb = tb_for()
    tb.scheduler.run_until(1000)
    data = tb.log.of_kind("data")
    assert [r.t for r in data] == list(range(100, 1001, 100))
    tb.scheduler.run_until(1005)
    snap = tb.snapshot()
    assert (snap.sent, snap.delivered, snap.dropped) == (10, 10, 0)
    assert snap.sent == snap.delivered + snap.dropped


def test_detach_then_three_sends_unroutable():
    tb = tb_for(providers=[{**small_config()["providers"][0], "period_ms": 1000}])
    hub_dispatch(tb, HubAction("detach-device", device_id="temp"))
    tb.scheduler.run_until(3000)
    snap = tb.snapshot()
    assert snap.dropped == 3 and snap.drop_reasons == {"unroutable": 3}
    assert snap.devices["temp"]["attached"] is False


def test_detach_gateway_node_blocks_actuator():
    tb = tb_for()
    hub_dispatch(tb, HubAction("detach-device", device_id="gw"))
    got = []
    tb.request("door", "open", {}, lambda r, t: got.append(r))
    tb.scheduler.run_until(100)
    assert got == [] and tb.network.drop_reasons == {"unroutable": 1}
    hub_dispatch(tb, HubAction("attach-device", device_id="gw"))
    tb.request("door", "open", {}, lambda r, t: got.append((r["status"], t)))
    tb.scheduler.run_until(200)
    assert got == [("ok", 110)]


def test_reconfigure_resets_and_changes_value():
    tb = tb_for()
    tb.scheduler.run_until(300)
    hub_dispatch(tb, HubAction("reconfigure-provider", device_id="temp", generator=dv.Constant(99)))
    assert tb.snapshot().devices["temp"]["sample_index"] == 0
    tb.scheduler.run_until(400)
    last = tb.log.of_kind("data")[-1].body
    assert last["value"] == 99 and last["index"] == 0


def test_set_loss_matches_oracle():
    tb = tb_for(seed=5)
    tb.scheduler.run_until(1000)  # 10 lossless sends, 10 uniforms consumed
    hub_dispatch(tb, HubAction("network-event", event=NetworkEvent("set-loss", ("sensor", "sink"), 0.5)))
    tb.scheduler.run_until(101_000)  # 1000 more sends
    u = ref_uniforms(ref_stream_seed(5, "netsim"))
    for _ in range(10):
        next(u)
    expected = sum(next(u) < 0.5 for _ in range(1000))
    assert tb.network.dropped == expected
    assert abs(expected - 500) < 60


def test_hub_actions_logged_exactly_once():
    tb = tb_for()
    actions = [
        HubAction("network-event", event=NetworkEvent("link-down", ("gw", "sink"))),
        HubAction("detach-device", device_id="door"),
        HubAction("attach-device", device_id="door"),
        HubAction("reconfigure-provider", device_id="temp", generator=dv.Linear(0, 1)),
    ]
    for i, a in enumerate(actions):
        tb.scheduler.run_until(10 * i)
        hub_dispatch(tb, a)
    recs = tb.log.of_kind("hub-action")
    assert [r.body for r in recs] == [a.describe() for a in actions]
    assert [r.t for r in recs] == [0, 10, 20, 30]


@pytest.mark.parametrize(
    "action, err",
    [
        (HubAction("detach-device", device_id="ghost"), UnknownDeviceError),
        (HubAction("reconfigure-provider", device_id="door", generator=dv.Constant(1)), UnknownDeviceError),
        (HubAction("network-event", event=NetworkEvent("link-down", ("gw", "nowhere"))), UnknownTargetError),
    ],
)
def test_unknown_targets_rejected(action, err):
    tb = tb_for()
    with pytest.raises(err):
        hub_dispatch(tb, action)


def test_bind_failure_is_side_effect_free():
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    blocker.listen()
    port = blocker.getsockname()[1]
    try:
        cfg = small_config(adapters=[
            {"device_id": "free", "kind": "external-tcp", "host": "127.0.0.1", "port": 0},
            {"device_id": "taken", "kind": "external-tcp", "host": "127.0.0.1", "port": port},
        ])
        with pytest.raises(ProvisionError, match="taken"):
            provision(load_config(document(cfg)), 1)
        # the first slot's listener must have been released
        again = provision(load_config(document(small_config(adapters=[
            {"device_id": "taken", "kind": "external-tcp", "host": "127.0.0.1", "port": 0}]))), 1)
        again.close()
    finally:
        blocker.close()


def test_force_loopback_skips_sockets():
    cfg = small_config(adapters=[{"device_id": "x", "kind": "external-tcp", "host": "127.0.0.1", "port": 1}])
    tb = provision(load_config(document(cfg)), 1, force_loopback=True)
    assert tb.adapters["x"].state == "loopback"


def test_in_sim_request_round_trip_time():
    tb = tb_for()
    got = []
    tb.request("echo", "ping", {}, lambda r, t: got.append((r, t)))
    tb.scheduler.run_until(100)
    assert got == [({"status": "ok", "state": "up", "data": {"pong": True}}, 20)]


def test_provision_does_not_mutate_config():
    cfg = load_config(document())
    tb = provision(cfg, 1)
    hub_dispatch(tb, HubAction("reconfigure-provider", device_id="temp", generator=dv.Constant(0)))
    assert cfg.providers[0].generator == dv.Constant(21.5)


def test_every_send_resolved_once():
    tb = provision(load_config(demo_document(4)), 3)
    tb.scheduler.run_until(5000)
    hub_dispatch(tb, HubAction("detach-device", device_id="houseB.gw"))
    tb.scheduler.run_until(10_000)
    sent = {r.body["id"] for r in tb.log.of_kind("message-sent")}
    ends = [r.body["id"] for r in tb.log.records if r.kind in ("message-delivered", "message-dropped")]
    assert len(ends) == len(set(ends))
    assert set(ends) <= sent
    # anything unresolved must still be in flight (sent within the longest path latency)
    sent_at = {r.body["id"]: r.t for r in tb.log.of_kind("message-sent")}
    assert all(sent_at[i] > 10_000 - 50 for i in sent - set(ends))
