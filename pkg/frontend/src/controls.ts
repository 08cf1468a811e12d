// Pure helpers behind the control strip, kept out of main.ts so the
// session plumbing is testable without a DOM.

export interface ConfigureForm {
  controller: string;
  trajectory: string;
  duration: number;
  human: string;
  model: string | null;
  rateHz: number;
  realtime: boolean;
  alpha: number;
}

/** The cooperation weight lives strictly inside (0, 1). */
export function clampAlpha(value: number, eps = 0.01): number {
  if (!Number.isFinite(value)) return 0.8;
  return Math.min(1 - eps, Math.max(eps, value));
}

export function configurePayload(form: ConfigureForm): Record<string, unknown> {
  return {
    controller: form.controller,
    trajectory: form.trajectory,
    duration: form.duration,
    human: form.human,
    model: form.model,
    rate_hz: form.rateHz,
    realtime: form.realtime,
    alpha: clampAlpha(form.alpha),
  };
}

/** Replace the options of a select, keeping the selection when possible. */
export function fillSelect(el: HTMLSelectElement, options: string[], keep?: string | null): void {
  const current = keep ?? el.value;
  el.innerHTML = "";
  for (const name of options) {
    const opt = document.createElement("option");
    opt.value = name;
    opt.textContent = name;
    el.appendChild(opt);
  }
  if (options.includes(current)) el.value = current;
}
