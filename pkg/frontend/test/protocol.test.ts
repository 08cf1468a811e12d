import { describe, expect, it } from "vitest";

import { PROTOCOL_VERSION, ProtocolError, decode, encode } from "../src/protocol.js";

describe("envelope encoding", () => {
  it("wraps payloads with kind, seq and schema version", () => {
    const doc = JSON.parse(encode("configure", 7, { trajectory: "curved" }));
    expect(doc).toEqual({
      kind: "configure",
      seq: 7,
      schema_version: PROTOCOL_VERSION,
      payload: { trajectory: "curved" },
    });
  });

  it("round-trips through decode", () => {
    const env = decode(encode("force_input", 3, { u: [1.5, -2.25] }));
    expect(env.kind).toBe("force_input");
    expect(env.seq).toBe(3);
    expect(env.payload).toEqual({ u: [1.5, -2.25] });
  });
});

describe("decode rejections", () => {
  it("rejects malformed JSON", () => {
    expect(() => decode("{oops")).toThrow(ProtocolError);
    expect(() => decode("{oops")).toThrow(/not valid JSON/);
  });

  it("rejects non-object messages", () => {
    expect(() => decode("[1, 2]")).toThrow(/JSON object/);
    expect(() => decode("42")).toThrow(/JSON object/);
  });

  it("rejects a missing kind", () => {
    expect(() => decode(JSON.stringify({ seq: 1, schema_version: 1 }))).toThrow(/no kind/);
  });

  it("rejects foreign schema versions", () => {
    const raw = JSON.stringify({ kind: "hello", seq: 1, schema_version: 2, payload: {} });
    expect(() => decode(raw)).toThrow(/schema_version 2 unsupported/);
  });

  it("rejects non-object payloads", () => {
    const raw = JSON.stringify({ kind: "hello", seq: 1, schema_version: 1, payload: [1] });
    expect(() => decode(raw)).toThrow(/payload must be an object/);
  });

  it("defaults an absent payload to an empty object", () => {
    const env = decode(JSON.stringify({ kind: "stop", seq: 2, schema_version: 1 }));
    expect(env.payload).toEqual({});
  });
});
