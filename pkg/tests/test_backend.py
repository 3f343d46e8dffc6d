import json
import random
import threading
import time

import httpx
import pytest

from xltransfer.align import Alignment
from xltransfer.backend import (
    MOCK_ENDPOINT,
    AttemptCounter,
    BackendError,
    EndpointError,
    GenerationConfig,
    LabelerConfig,
    MockProjector,
    generate_batch,
    mock_transfer,
    pseudo_label_batch,
)
from xltransfer.codec import LabeledSentence, parse_annotated, render_annotated
from xltransfer.corpus import Example, ParallelExample
from xltransfer.prompting import PromptRecord

URL = "http://stub.invalid/v1/completions"


def _records(n):
    return [PromptRecord(f"r{i}", f"prompt {i}") for i in range(n)]


def _client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def echo_handler(seed=0, seen=None):
    rng = random.Random(seed)
    lock = threading.Lock()

    def handler(request):
        body = json.loads(request.content)
        if seen is not None:
            with lock:
                seen.append((body, dict(request.headers)))
        with lock:
            delay = rng.random() * 0.01
        time.sleep(delay)
        n = body["prompt"].split()[-1]
        return httpx.Response(200, json={"choices": [{"text": f"[date : tok{n}]"}]})

    return handler


@pytest.mark.parametrize("in_flight", [1, 2, 8])
def test_order_preserved(in_flight):
    recs = _records(40)
    cfg = GenerationConfig(endpoint=URL, max_in_flight=in_flight)
    with _client(echo_handler(in_flight)) as client:
        out = generate_batch(recs, cfg, client=client)
    assert [r.id for r in out] == [r.id for r in recs]
    assert [r.raw_text for r in out] == [f"[date : tok{i}]" for i in range(40)]
    assert all(r.parsed.labels == ("date",) for r in out)


def test_three_records_two_in_flight():
    with _client(echo_handler()) as client:
        out = generate_batch(_records(3), GenerationConfig(endpoint=URL, max_in_flight=2), client=client)
    assert [r.id for r in out] == ["r0", "r1", "r2"]


def test_default_request_body():
    seen = []
    cfg = GenerationConfig.for_task("slot_filling", endpoint=URL, api_key="secret")
    with _client(echo_handler(seen=seen)) as client:
        generate_batch(_records(1), cfg, client=client)
    body, headers = seen[0]
    assert body == {"prompt": "prompt 0", "max_new_tokens": 512, "penalty_alpha": 0.6, "top_k": 4}
    assert headers["authorization"] == "Bearer secret"
    assert GenerationConfig.for_task("ner").max_new_tokens == 768


def test_config_validation():
    with pytest.raises(ValueError):
        GenerationConfig(penalty_alpha=1.5)
    with pytest.raises(ValueError):
        GenerationConfig(max_in_flight=0)


def test_retries_then_success():
    calls = {"n": 0}
    lock = threading.Lock()

    def handler(request):
        with lock:
            calls["n"] += 1
            fail = calls["n"] % 2 == 1
        if fail:
            return httpx.Response(503)
        return httpx.Response(200, json={"text": "ok"})

    counter = AttemptCounter()
    recs = _records(10)
    cfg = GenerationConfig(endpoint=URL, max_retries=2, max_in_flight=1)
    with _client(handler) as client:
        out = generate_batch(recs, cfg, client=client, attempts=counter)
    assert [r.raw_text for r in out] == ["ok"] * 10
    assert counter.count <= len(recs) * (1 + cfg.max_retries)


def test_persistent_failure_raises_with_partial():
    def handler(request):
        if "prompt 3" in request.content.decode():
            return httpx.Response(500)
        return httpx.Response(200, json={"text": "ok"})

    counter = AttemptCounter()
    cfg = GenerationConfig(endpoint=URL, max_retries=1, max_in_flight=1)
    with _client(handler) as client, pytest.raises(EndpointError) as err:
        generate_batch(_records(6), cfg, client=client, attempts=counter)
    assert [r.id for r in err.value.partial] == ["r0", "r1", "r2", "r4", "r5"]
    assert counter.count <= 6 * 2


def test_timeout_marks_result_failed():
    def handler(request):
        if "prompt 1" in request.content.decode():
            raise httpx.ReadTimeout("slow", request=request)
        return httpx.Response(200, json={"text": "ok"})

    counter = AttemptCounter()
    cfg = GenerationConfig(endpoint=URL, max_retries=2)
    with _client(handler) as client:
        out = generate_batch(_records(3), cfg, client=client, attempts=counter)
    assert [r.failed for r in out] == [False, True, False]
    assert out[1].parsed is None
    assert counter.count == 2 + 3


def test_unparsable_output_kept_raw():
    def handler(request):
        return httpx.Response(200, json={"choices": [{"message": {"content": "[date : x"}}]})

    with _client(handler) as client:
        [res] = generate_batch(_records(1), GenerationConfig(endpoint=URL), client=client)
    assert res.raw_text == "[date : x" and res.parsed is None and res.warnings


def _pair(src_text, tgt_tokens):
    s = parse_annotated(src_text)
    t = LabeledSentence.unlabeled(tgt_tokens)
    return ParallelExample("p", Example("p", "en-US", LabeledSentence.unlabeled(s.tokens), s), Example("p", "hi-IN", t))


def test_mock_transfer_cases():
    pair = _pair("[person : john smith] called", ["jon", "smith", "bulaya"])
    assert mock_transfer(pair, Alignment.identity(3)) == "[person : jon smith] bulaya"
    assert mock_transfer(pair, Alignment(frozenset(), 3, 3)) == "jon smith bulaya"
    fig2 = _pair("will it be [weather_descriptor : sun] on [date : sunday]", ["kyā", "ravivāra", "ko", "sūraja", "hogā"])
    a = Alignment(frozenset({(3, 3), (5, 1), (4, 2), (2, 4)}), 6, 5)
    assert mock_transfer(fig2, a) == "kyā [date : ravivāra] ko [weather_descriptor : sūraja] hogā"


def test_mock_endpoint_is_deterministic():
    pair = _pair("[person : john smith] called", ["jon", "smith", "bulaya"])
    mock = MockProjector({"p": pair}, {"p": Alignment.identity(3)})
    cfg = GenerationConfig(endpoint=MOCK_ENDPOINT)
    recs = [PromptRecord("p", "x")]
    a, b = generate_batch(recs, cfg, mock=mock), generate_batch(recs, cfg, mock=mock)
    assert a == b and a[0].parsed.labels == ("person", "person", None)
    with pytest.raises(BackendError):
        generate_batch(recs, cfg)


def _examples():
    out = []
    for i, text in enumerate(["[PER : ram] gaya", "wake me up", "[LOC : delhi] [ORG : tata] x"]):
        g = parse_annotated(text)
        out.append(Example(str(i), "en-US", LabeledSentence.unlabeled(g.tokens), g))
    return out


def test_labeler_oracle():
    exs = _examples()
    got = pseudo_label_batch(exs, LabelerConfig())
    assert got == {ex.id: ex.gold for ex in exs}
    with pytest.raises(ValueError):
        pseudo_label_batch([Example("z", "en-US", LabeledSentence.unlabeled(["a"]))], LabelerConfig())


def test_labeler_endpoint_and_length_mismatch():
    def handler(request):
        toks = json.loads(request.content)["tokens"]
        tags = ["B-PER"] + ["O"] * (len(toks) - 1)
        if toks[0] == "wake":
            tags = tags[:-1]
        return httpx.Response(200, json={"labels": tags})

    diags = []
    with _client(handler) as client:
        got = pseudo_label_batch(_examples(), LabelerConfig(endpoint=URL), client, diags)
    assert sorted(got) == ["0", "2"]
    assert got["2"].labels == ("PER", None, None)
    assert got["2"].tokens == _examples()[2].tokens
    assert len(diags) == 1 and "LengthMismatch" in diags[0]


def test_labeler_endpoint_error():
    with _client(lambda r: httpx.Response(500)) as client, pytest.raises(EndpointError):
        pseudo_label_batch(_examples(), LabelerConfig(endpoint=URL), client)


def test_render_of_mock_matches_projection():
    pair = _pair("a [x : b]", ["B", "A"])
    a = Alignment(frozenset({(0, 1), (1, 0)}), 2, 2)
    assert parse_annotated(mock_transfer(pair, a)) == LabeledSentence(("B", "A"), ("x", None))
    assert render_annotated(parse_annotated(mock_transfer(pair, a))) == "[x : B] A"
