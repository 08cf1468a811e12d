// Entry point: connects to the live service, applies queued messages once
// per animation frame, draws the monitor and streams pointer forces while
// the operator holds the pointer down on the canvas.

import { SessionClient } from "./client.js";
import { clampAlpha, configurePayload, fillSelect } from "./controls.js";
import { DEFAULT_MAPPING, pointerToForce, SendGate } from "./input.js";
import { drawFrame } from "./render.js";
import { WORKSPACE, WorkspaceTransform } from "./transform.js";
import { applyServer, initialView, markDisconnected, type ViewState } from "./view.js";

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

const canvas = byId<HTMLCanvasElement>("monitor");
const ctx = canvas.getContext("2d");
if (!ctx) throw new Error("canvas 2d context unavailable");
const tf = new WorkspaceTransform(WORKSPACE, canvas.width, canvas.height);

const controller = byId<HTMLSelectElement>("controller");
const trajectory = byId<HTMLSelectElement>("trajectory");
const model = byId<HTMLSelectElement>("model");
const human = byId<HTMLSelectElement>("human");
const duration = byId<HTMLInputElement>("duration");
const realtime = byId<HTMLInputElement>("realtime");
const alpha = byId<HTMLInputElement>("alpha");
const alphaOut = byId<HTMLElement>("alpha-value");
const epochs = byId<HTMLInputElement>("epochs");
const status = byId<HTMLElement>("status");
const errorLine = byId<HTMLElement>("error-line");
const tlPanel = byId<HTMLElement>("tl-panel");
const recordBtn = byId<HTMLButtonElement>("record");
const exportLine = byId<HTMLElement>("export-line");

let view: ViewState = initialView();
let mapping = { ...DEFAULT_MAPPING };
let gate: SendGate | null = null;
let cursor: [number, number] | null = null;
let engaged = false;
let populated = false;

const wsUrl = `${location.protocol === "https:" ? "wss" : "ws"}://${location.host}/ws`;
const client = new SessionClient(wsUrl);
client.onclose = () => {
  view = markDisconnected(view);
};
client.ondecodeerror = (err) => {
  view = { ...view, lastError: err.message };
};

function currentForm() {
  return {
    controller: controller.value,
    trajectory: trajectory.value,
    duration: Number(duration.value),
    human: human.value,
    model: model.value === "none" ? null : model.value,
    rateHz: view.hello?.rate_hz ?? 125,
    realtime: realtime.checked,
    alpha: clampAlpha(Number(alpha.value)),
  };
}

byId<HTMLButtonElement>("apply").onclick = () => client.send("configure", configurePayload(currentForm()));
byId<HTMLButtonElement>("start").onclick = () => client.send("start");
byId<HTMLButtonElement>("pause").onclick = () => client.send("stop");
recordBtn.onclick = () => client.send("record_toggle", { on: !view.recording });
byId<HTMLButtonElement>("export").onclick = () => client.send("export");
byId<HTMLButtonElement>("tl").onclick = () =>
  client.send("tl_request", {
    model: model.value === "none" ? undefined : model.value,
    epochs: Number(epochs.value),
    hot_swap: true,
  });

alpha.oninput = () => {
  alphaOut.textContent = clampAlpha(Number(alpha.value)).toFixed(2);
};

canvas.addEventListener("pointerdown", (ev) => {
  engaged = true;
  canvas.setPointerCapture(ev.pointerId);
});
canvas.addEventListener("pointerup", () => {
  engaged = false;
  if (client.open) client.send("force_input", { u: [0, 0] });
});
canvas.addEventListener("pointermove", (ev) => {
  const r = canvas.getBoundingClientRect();
  cursor = tf.toWorkspace([ev.clientX - r.left, ev.clientY - r.top]);
});

function syncControls() {
  const hello = view.hello;
  if (hello && !populated) {
    populated = true;
    fillSelect(controller, hello.controllers, hello.session.controller);
    fillSelect(trajectory, hello.trajectories, hello.session.trajectory);
    fillSelect(model, ["none", ...hello.models], hello.session.model ?? "none");
    fillSelect(human, ["live", "synthetic"], hello.session.human);
    duration.value = String(hello.session.duration);
    realtime.checked = hello.session.realtime;
    alpha.value = String(hello.session.alpha);
    alphaOut.textContent = hello.session.alpha.toFixed(2);
    mapping = { ...mapping, cap: hello.force_cap };
    gate = new SendGate(mapping, hello.rate_hz);
  }
  const total = view.session?.steps ?? 0;
  status.textContent =
    `${view.status}  step ${view.step}/${total}  t=${view.t.toFixed(2)} s` +
    (view.recording ? "  REC" : "");
  errorLine.textContent = view.lastError ?? "";
  exportLine.textContent = view.lastExport
    ? `saved ${view.lastExport.id} (${view.lastExport.steps} steps)`
    : "";
  recordBtn.textContent = view.recording ? "recording: on" : "recording: off";
  if (view.tl) {
    const t = view.tl;
    tlPanel.textContent =
      `${t.model} from ${t.base_model}: e_rms ${t.e_rms_base.toExponential(3)} -> ` +
      `${t.e_rms_tuned.toExponential(3)} (${(t.improvement * 100).toFixed(1)}%), ` +
      `${t.trainable_params}/${t.total_params} params tuned` +
      (t.hot_swapped ? ", live model swapped" : "");
  }
}

function frame(now: number) {
  for (const env of client.drain()) {
    view = applyServer(view, env);
  }
  syncControls();
  if (engaged && cursor && view.x && view.status === "running" && gate?.ready(now)) {
    client.send("force_input", {
      u: pointerToForce(cursor, [view.x[0], view.x[1]], mapping),
    });
  }
  drawFrame(ctx!, view, tf, canvas.width, canvas.height);
  requestAnimationFrame(frame);
}

requestAnimationFrame(frame);
