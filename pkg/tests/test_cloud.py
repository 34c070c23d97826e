import json
import random
import threading

import pytest

from bracelet.cloud import (
    BadRequest,
    CloudClient,
    CloudService,
    Conflict,
    JournalError,
    PayloadTooLarge,
    ServiceError,
    make_server,
)
from bracelet.matching import CaseGroup, local_match

from conftest import counter_ids

A, B, C, D = (bytes([i]) * 16 for i in (1, 2, 3, 4))


def bundle(*tags):
    return json.dumps({"tags": [t.hex() for t in tags]})


def contacts(*pairs):
    return {"contacts": [{"tag": t.hex(), "exposure_s": e} for t, e in pairs]}


@pytest.fixture
def service(tmp_path):
    return CloudService(tmp_path / "journal.jsonl", id_factory=counter_ids())


def test_upload_returns_group_and_cursor(service):
    response = service.handle_upload(bundle(A, B, C))
    assert response == {"group_id": (1).to_bytes(16, "big").hex(), "cursor": 1}


def test_upload_idempotent(service):
    first = service.handle_upload(bundle(A, B, C))
    again = service.handle_upload(bundle(C, B, A))
    assert first == again
    assert service.handle_fetch(0)["new_cursor"] == 1


@pytest.mark.parametrize("body", ['{"tags": []}', "not json", "[]", '{"tags": ["zz"]}',
                                  '{"tags": "abc"}', b"\xff\xfe"])
def test_upload_bad_request(service, body):
    with pytest.raises(BadRequest) as info:
        service.handle_upload(body)
    assert info.value.status == 400


def test_upload_conflict(service):
    service.handle_upload(bundle(A, B))
    with pytest.raises(Conflict) as info:
        service.handle_upload(bundle(B, C))
    assert info.value.status == 409


def test_upload_too_large(service):
    tags = [i.to_bytes(16, "big") for i in range(2049)]
    with pytest.raises(PayloadTooLarge) as info:
        service.handle_upload(bundle(*tags))
    assert info.value.status == 413
    assert service.handle_upload(bundle(*tags[:2048]))["cursor"] == 1


def test_fetch_cursor_arithmetic(service):
    service.handle_upload(bundle(A))
    service.handle_upload(bundle(B, C))
    everything = service.handle_fetch(0)
    assert everything["new_cursor"] == 2
    assert [g["tags"] for g in everything["groups"]] == [[A.hex()], [B.hex(), C.hex()]]
    assert [g["cursor"] for g in everything["groups"]] == [1, 2]
    assert service.handle_fetch(1)["groups"] == everything["groups"][1:]
    assert service.handle_fetch(2) == {"groups": [], "new_cursor": 2}
    with pytest.raises(BadRequest):
        service.handle_fetch(3)
    with pytest.raises(BadRequest):
        service.handle_fetch(-1)
    with pytest.raises(BadRequest):
        service.handle_fetch("x")


def test_check_cross_rotation(service):
    service.handle_upload(bundle(A, B))
    decision = service.handle_check(contacts((A, 480), (B, 480)))
    assert decision == {"positive": True, "matched_group_count": 1,
                        "max_group_exposure_s": 960.0}


def test_check_empty(service):
    decision = service.handle_check({"contacts": []})
    assert decision["positive"] is False and decision["matched_group_count"] == 0


def test_check_custom_threshold(service):
    service.handle_upload(bundle(A))
    assert service.handle_check({**contacts((A, 600)), "threshold_s": 600})["positive"]


@pytest.mark.parametrize("request_body", [
    contacts((A, -1)),
    {"contacts": [{"tag": A.hex()}]},
    {"contacts": [{"tag": "nothex", "exposure_s": 3}]},
    {"contacts": "x"},
    {"contacts": [], "threshold_s": "ten"},
    {"contacts": [{"tag": A.hex(), "exposure_s": True}]},
])
def test_check_bad_request(service, request_body):
    with pytest.raises(BadRequest):
        service.handle_check(request_body)


def test_journal_format(service):
    service.handle_upload(bundle(A, B))
    line = service.journal_path.read_text().splitlines()[0]
    assert line == ('{"cursor":1,"group_id":"%s","tags":["%s","%s"]}'
                    % ((1).to_bytes(16, "big").hex(), A.hex(), B.hex()))


def test_restart_reproduces_fetch_bytes(tmp_path):
    path = tmp_path / "j.jsonl"
    first = CloudService(path)
    first.handle_upload(bundle(A, B))
    first.handle_upload(bundle(C))
    before = [first.fetch_body(c) for c in range(3)]
    del first
    restarted = CloudService(path)
    assert [restarted.fetch_body(c) for c in range(3)] == before
    # idempotent re-upload survives restart
    assert restarted.handle_upload(bundle(B, A))["cursor"] == 1
    assert restarted.handle_upload(bundle(D))["cursor"] == 3


def test_torn_tail_discarded(tmp_path):
    path = tmp_path / "j.jsonl"
    service = CloudService(path)
    service.handle_upload(bundle(A))
    with open(path, "a") as fh:
        fh.write('{"cursor":2,"group_id":"ab')
    restarted = CloudService(path)
    assert restarted.handle_fetch(0)["new_cursor"] == 1
    assert restarted.handle_upload(bundle(B))["cursor"] == 2
    assert CloudService(path).handle_fetch(0)["new_cursor"] == 2


def test_corrupt_journal_line(tmp_path):
    path = tmp_path / "j.jsonl"
    path.write_text("garbage\n")
    with pytest.raises(JournalError):
        CloudService(path)


def test_overlapping_journal_entries(tmp_path):
    path = tmp_path / "j.jsonl"
    entry = {"cursor": 1, "group_id": "00" * 16, "tags": [A.hex()]}
    again = {"cursor": 2, "group_id": "11" * 16, "tags": [A.hex()]}
    path.write_text(json.dumps(entry) + "\n" + json.dumps(again) + "\n")
    with pytest.raises(JournalError, match=":2:"):
        CloudService(path)


def test_check_leaves_no_trace(service):
    service.handle_upload(bundle(A))
    before = service.journal_path.read_bytes()
    service.handle_check(contacts((A, 100), (D, 200)))
    assert service.journal_path.read_bytes() == before
    assert D.hex() not in before.decode()


@pytest.mark.parametrize("seed", range(25))
def test_check_equals_local_match_over_fetch(seed):
    rng = random.Random(seed)
    service = CloudService(id_factory=counter_ids())
    pool = [rng.randbytes(16) for _ in range(30)]
    pos = 0
    while pos < len(pool):
        size = rng.randint(1, 5)
        service.handle_upload(bundle(*pool[pos:pos + size]))
        pos += size
    heard = rng.sample(pool, 12) + [rng.randbytes(16) for _ in range(3)]
    request = contacts(*[(t, rng.choice([0, 120, rng.uniform(0, 700)])) for t in heard])
    snapshot = [CaseGroup.from_dict(g) for g in service.handle_fetch(0)["groups"]]

    class C:
        def __init__(self, d):
            self.tag, self.exposure_s = bytes.fromhex(d["tag"]), d["exposure_s"]

    local = local_match(snapshot, [C(d) for d in request["contacts"]]).to_dict()
    assert service.handle_check(json.dumps(request)) == local


# -- HTTP ---------------------------------------------------------------------

@pytest.fixture
def http_service(tmp_path):
    service = CloudService(tmp_path / "j.jsonl", id_factory=counter_ids())
    server = make_server(service, "127.0.0.1", 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    yield service, CloudClient(f"http://{host}:{port}")
    server.shutdown()
    server.server_close()


def test_http_endpoints(http_service):
    service, client = http_service
    uploaded = client.upload({"tags": [A.hex(), B.hex()]})
    assert uploaded["cursor"] == 1
    fetched = client.fetch(0)
    assert fetched["new_cursor"] == 1
    assert fetched["groups"][0]["group_id"] == uploaded["group_id"]
    assert client.check(contacts((A, 480), (B, 480)))["positive"] is True


def test_http_error_statuses(http_service):
    _, client = http_service
    client.upload({"tags": [A.hex()]})
    with pytest.raises(ServiceError) as info:
        client.upload({"tags": [A.hex(), B.hex()]})
    assert info.value.status == 409
    with pytest.raises(ServiceError) as info:
        client.fetch(5)
    assert info.value.status == 400
    with pytest.raises(ServiceError) as info:
        client.upload({"tags": [i.to_bytes(16, "big").hex() for i in range(3000)]})
    assert info.value.status == 413
    with pytest.raises(ServiceError) as info:
        client._request("GET", "/v1/nope")
    assert info.value.status == 404


def test_concurrent_uploads_serialize(tmp_path):
    service = CloudService(tmp_path / "j.jsonl")
    tags = [i.to_bytes(16, "big") for i in range(200)]

    def worker(chunk):
        for t in chunk:
            service.handle_upload(bundle(t))

    threads = [threading.Thread(target=worker, args=(tags[i::4],)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    lines = (tmp_path / "j.jsonl").read_text().splitlines()
    assert [json.loads(l)["cursor"] for l in lines] == list(range(1, 201))
    assert CloudService(tmp_path / "j.jsonl").fetch_body(0) == service.fetch_body(0)
