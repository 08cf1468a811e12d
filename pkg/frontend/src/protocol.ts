// Wire protocol of the live service websocket, mirrored field for field.
// Every message travels in the envelope {kind, seq, schema_version, payload};
// the server answers client requests with a message of the same kind whose
// payload carries ack = <client seq>.  force_input is fire and forget.

export const PROTOCOL_VERSION = 1;

export type ClientKind =
  | "configure"
  | "start"
  | "force_input"
  | "stop"
  | "record_toggle"
  | "export"
  | "tl_request";

export interface Envelope {
  kind: string;
  seq: number;
  schema_version: number;
  payload: Record<string, unknown>;
}

export interface ObstacleDoc {
  center: [number, number];
  half_width: number;
  arc_fraction: number;
}

export interface SessionSummary {
  id: string;
  status: string;
  controller: string;
  trajectory: string;
  duration: number;
  dt: number;
  human: string;
  model: string | null;
  rate_hz: number;
  realtime: boolean;
  alpha: number;
  force_cap: number;
  path: [number, number][];
  obstacle: ObstacleDoc | null;
  steps: number;
}

export interface HelloPayload {
  schema_version: number;
  version: string;
  id: string;
  dof: number;
  rate_hz: number;
  force_cap: number;
  controllers: string[];
  trajectories: string[];
  models: string[];
  session: SessionSummary;
}

export interface StateUpdate {
  step: number;
  t: number;
  x: number[];
  v: number[];
  u_h: number[];
  u_r: number[];
  x_ref_r: number[];
  obstacle: ObstacleDoc | null;
  recording: boolean;
}

export interface PredictionUpdate {
  step: number;
  t: number;
  pick_index: number;
  points: [number, number][];
}

export interface TlResult {
  model: string;
  model_id: string;
  base_model: string;
  episodes: number;
  e_rms_base: number;
  e_rms_tuned: number;
  improvement: number;
  trainable_params: number;
  total_params: number;
  recurrent_unchanged: boolean;
  hot_swapped: boolean;
}

export class ProtocolError extends Error {}

export function encode(kind: ClientKind, seq: number, payload: object = {}): string {
  return JSON.stringify({ kind, seq, schema_version: PROTOCOL_VERSION, payload });
}

export function decode(raw: string): Envelope {
  let doc: unknown;
  try {
    doc = JSON.parse(raw);
  } catch {
    throw new ProtocolError("message is not valid JSON");
  }
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    throw new ProtocolError("message must be a JSON object");
  }
  const env = doc as Record<string, unknown>;
  if (typeof env.kind !== "string") {
    throw new ProtocolError("message has no kind");
  }
  if (env.schema_version !== PROTOCOL_VERSION) {
    throw new ProtocolError(`schema_version ${String(env.schema_version)} unsupported`);
  }
  const payload = env.payload ?? {};
  if (typeof payload !== "object" || Array.isArray(payload)) {
    throw new ProtocolError("payload must be an object");
  }
  return {
    kind: env.kind,
    seq: Number(env.seq),
    schema_version: PROTOCOL_VERSION,
    payload: payload as Record<string, unknown>,
  };
}
