import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobreg.stanza import (
    ALLOWED_TYPES,
    Child,
    Identifier,
    InvalidStanza,
    MAX_STANZA_BYTES,
    ParseError,
    Stanza,
    StanzaKind,
    decode,
    encode,
    iq,
    parse_identifier,
    presence,
    render_identifier,
)
from support import random_stanza

TRAFFIC = parse_identifier("trafficinfo@acmeCity")
MAINSTREET = parse_identifier("trafficinfo@acmeCity/mainstreet")


# -- identifiers -------------------------------------------------------------

def test_identifier_example_lowercases_net():
    ident = parse_identifier("trafficinfo@acmeCity/mainstreet")
    assert ident == Identifier("trafficinfo", "acmecity", "mainstreet")
    assert render_identifier(ident) == "trafficinfo@acmecity/mainstreet"


def test_identifier_private_registry_net():
    assert parse_identifier("hospital@local") == Identifier("hospital", "local")


@pytest.mark.parametrize("bad", ["@local", "hospital", "hospital@", "a@b/",
                                 "ho spital@local", "a@b@c", "a@b/c/d"])
def test_identifier_rejects_malformed(bad):
    with pytest.raises(ParseError):
        parse_identifier(bad)


def test_identifier_roundtrip_on_canonical_form():
    for text in ["a@b", "a@b/c", "x.y-z_1@net-7/svc.2"]:
        assert render_identifier(parse_identifier(text)) == text


# -- canonical encoding -------------------------------------------------------

def test_presence_example_canonical_bytes():
    stanza = presence("p1", "available", TRAFFIC, MAINSTREET,
                      [Child("status", "Available")])
    assert encode(stanza) == (
        b'<presence id="p1" type="available" to="trafficinfo@acmecity"'
        b' from="trafficinfo@acmecity/mainstreet">'
        b'<status>Available</status></presence>'
    )


def test_empty_payload_iq_bytes():
    stanza = iq("q1", "get", parse_identifier("g@local"),
                parse_identifier("h@local/s"))
    assert encode(stanza) == (
        b'<iq id="q1" type="get" to="g@local" from="h@local/s"></iq>')


def test_encode_is_deterministic_across_attr_insertion_order():
    a = Stanza(StanzaKind.IQ, "i", "get", TRAFFIC, MAINSTREET,
               [Child("x", "t", {"a": "1", "b": "2"})])
    b = Stanza(StanzaKind.IQ, "i", "get", TRAFFIC, MAINSTREET,
               [Child("x", "t", {"b": "2", "a": "1"})])
    assert a == b
    assert encode(a) == encode(b)


def test_encode_rejects_illegal_type():
    stanza = iq("x", "destroy", TRAFFIC, MAINSTREET)
    with pytest.raises(InvalidStanza):
        encode(stanza)


def test_encode_rejects_empty_id():
    with pytest.raises(InvalidStanza):
        encode(iq("", "get", TRAFFIC, MAINSTREET))


def test_encode_rejects_oversize():
    big = Stanza(StanzaKind.MESSAGE, "m", "push", TRAFFIC, MAINSTREET,
                 [Child("blob", "x" * (MAX_STANZA_BYTES + 1))])
    with pytest.raises(InvalidStanza):
        encode(big)


def test_encode_rejects_unrepresentable_characters():
    with pytest.raises(InvalidStanza):
        encode(iq("i", "get", TRAFFIC, MAINSTREET, [Child("x", "\x00")]))


# -- decoding ------------------------------------------------------------------

def test_decode_inverse_of_encode_on_example():
    stanza = presence("p1", "available", TRAFFIC, MAINSTREET,
                      [Child("status", "Available")])
    assert decode(encode(stanza)) == stanza


def test_decode_tolerates_noncanonical_renderings():
    canonical = presence("p1", "available", TRAFFIC, MAINSTREET,
                         [Child("status", "Available")])
    raw = (b'<presence type="available" id="p1"\n'
           b'   from="trafficinfo@acmeCity/mainstreet" to="trafficinfo@acmeCity">\n'
           b'  <status>Available</status>\n'
           b'</presence>')
    assert decode(raw) == canonical
    assert encode(decode(raw)) == encode(canonical)


def test_decode_rejects_illegal_type_with_offset():
    with pytest.raises(ParseError) as err:
        decode(b'<iq id="x" type="destroy" to="g@local" from="h@local/s"></iq>')
    assert "destroy" in str(err.value)
    assert err.value.offset >= 0


@pytest.mark.parametrize("raw, fragment", [
    (b"<bogus id='x' type='get' to='a@b' from='c@d'/>", "unknown root"),
    (b"<iq type='get' to='a@b' from='c@d'/>", "missing attribute 'id'"),
    (b"<iq id='' type='get' to='a@b' from='c@d'/>", "empty stanza id"),
    (b"<iq id='x' type='get' to='a@b' from='c@d' extra='1'/>", "unexpected attribute"),
    (b"<iq id='x' type='get' to='nope' from='c@d'/>", "missing '@'"),
    (b"<iq id='x' type='get' to='a@b' from='c@d'><a><b><c/></b></a></iq>",
     "too deep"),
    (b"not xml at all", "syntax"),
    (b"<!DOCTYPE foo [<!ENTITY a 'b'>]><iq id='x' type='get' to='a@b' from='c@d'/>",
     "doctype"),
])
def test_decode_error_cases(raw, fragment):
    with pytest.raises(ParseError) as err:
        decode(raw)
    assert fragment in str(err.value)


def test_decode_reports_byte_offset_for_malformed_tail():
    raw = b'<iq id="x" type="get" to="a@b" from="c@d"></iq>trailing'
    with pytest.raises(ParseError) as err:
        decode(raw)
    assert err.value.offset >= 40


def test_payload_escaping_roundtrip():
    stanza = iq("i1", "set", TRAFFIC, MAINSTREET, [
        Child("data", 'a<b>&"\'\n\ttext\r', {"attr": 'x&<>"\n\t'}),
        Child("unicode", "café 中文 \U0001f600"),
    ])
    data = encode(stanza)
    assert b"\n" not in data  # single-line guarantee for snapshots
    assert decode(data) == stanza


# -- properties -----------------------------------------------------------------

@st.composite
def stanzas(draw):
    rng = random.Random(draw(st.integers(0, 2 ** 32 - 1)))
    return random_stanza(rng)


@given(stanzas())
@settings(max_examples=300, deadline=None)
def test_roundtrip_property(stanza):
    data = encode(stanza)
    again = decode(data)
    assert again == stanza
    assert encode(again) == data


def test_decoder_totality_seeded_fuzz():
    rng = random.Random(20_240_817)
    outcomes = {"ok": 0, "error": 0}
    for i in range(2_000):
        if i % 2 == 0:
            blob = bytes(rng.randrange(256)
                         for _ in range(rng.randrange(0, 120)))
        else:
            from support import mutate_bytes
            blob = encode(random_stanza(rng))
            for _ in range(rng.randint(1, 3)):
                blob = mutate_bytes(rng, blob)
        try:
            stanza = decode(blob)
        except ParseError:
            outcomes["error"] += 1
        else:
            outcomes["ok"] += 1
            assert decode(encode(stanza)) == stanza
    assert outcomes["error"] > 0


def test_allowed_type_sets_are_exactly_specified():
    assert ALLOWED_TYPES[StanzaKind.PRESENCE] == {"available", "unavailable"}
    assert ALLOWED_TYPES[StanzaKind.IQ] == {"get", "set", "result", "error"}
    assert ALLOWED_TYPES[StanzaKind.MESSAGE] == {"push", "pull", "binding",
                                                 "election"}
