// Client-side session picture, built purely from server messages.  The
// reducer owns no physics: positions, forces and predictions are copied
// from the payloads verbatim, so a replay of canned messages reconstructs
// exactly what the server streamed.

import type {
  Envelope,
  HelloPayload,
  ObstacleDoc,
  PredictionUpdate,
  SessionSummary,
  StateUpdate,
  TlResult,
} from "./protocol.js";

export interface ExportInfo {
  id: string;
  steps: number;
  path: string;
}

export interface ViewState {
  connected: boolean;
  banner: string | null; // disconnect notice; rendering freezes underneath
  hello: HelloPayload | null;
  session: SessionSummary | null;
  status: string;
  step: number;
  t: number;
  x: number[] | null;
  v: number[] | null;
  uH: number[] | null;
  uR: number[] | null;
  xRefR: number[] | null;
  obstacle: ObstacleDoc | null;
  recording: boolean;
  prediction: PredictionUpdate | null;
  lastExport: ExportInfo | null;
  tl: TlResult | null;
  lastError: string | null; // server error text, surfaced verbatim
}

export function initialView(): ViewState {
  return {
    connected: false,
    banner: null,
    hello: null,
    session: null,
    status: "idle",
    step: 0,
    t: 0,
    x: null,
    v: null,
    uH: null,
    uR: null,
    xRefR: null,
    obstacle: null,
    recording: false,
    prediction: null,
    lastExport: null,
    tl: null,
    lastError: null,
  };
}

function withSession(view: ViewState, session: SessionSummary): ViewState {
  return {
    ...view,
    session,
    status: session.status,
    obstacle: session.obstacle,
    // a reconfigured plant invalidates whatever was on screen
    x: null,
    v: null,
    uH: null,
    uR: null,
    xRefR: null,
    prediction: null,
    step: 0,
    t: 0,
  };
}

export function applyServer(view: ViewState, env: Envelope): ViewState {
  const p = env.payload;
  switch (env.kind) {
    case "hello": {
      const hello = p as unknown as HelloPayload;
      return { ...withSession(view, hello.session), connected: true, banner: null, hello };
    }
    case "configure": {
      const { ack: _ack, ...session } = p as Record<string, unknown>;
      return withSession(view, session as unknown as SessionSummary);
    }
    case "start":
    case "stop":
      return { ...view, status: String(p.status ?? view.status) };
    case "state_update": {
      const s = p as unknown as StateUpdate;
      return {
        ...view,
        step: s.step,
        t: s.t,
        x: s.x,
        v: s.v,
        uH: s.u_h,
        uR: s.u_r,
        xRefR: s.x_ref_r,
        obstacle: s.obstacle,
        recording: s.recording,
      };
    }
    case "prediction_update":
      return { ...view, prediction: p as unknown as PredictionUpdate };
    case "record_toggle":
      return { ...view, recording: Boolean(p.recording) };
    case "export":
      return {
        ...view,
        lastExport: { id: String(p.id), steps: Number(p.steps), path: String(p.path) },
      };
    case "tl_result":
      return { ...view, tl: p as unknown as TlResult };
    case "tl_request":
      return view; // progress ack only; the result message carries the numbers
    case "error":
      return { ...view, lastError: String(p.message) };
    default:
      return view;
  }
}

/** Connection dropped: freeze the last state and raise the banner. */
export function markDisconnected(view: ViewState): ViewState {
  return { ...view, connected: false, banner: "connection lost" };
}
