// Websocket session client.  Messages are queued as they arrive and drained
// once per animation frame by the caller (single-threaded event loop, no
// mid-frame state changes); outbound messages get monotonically increasing
// sequence numbers.

import { decode, encode, type ClientKind, type Envelope } from "./protocol.js";

export class SessionClient {
  private ws: WebSocket;
  private seq = 0;
  private queue: Envelope[] = [];
  onclose: (() => void) | null = null;
  ondecodeerror: ((err: Error) => void) | null = null;

  constructor(url: string) {
    this.ws = new WebSocket(url);
    this.ws.onmessage = (ev: MessageEvent) => {
      try {
        this.queue.push(decode(String(ev.data)));
      } catch (err) {
        this.ondecodeerror?.(err as Error);
      }
    };
    this.ws.onclose = () => this.onclose?.();
    this.ws.onerror = () => undefined; // close fires afterwards either way
  }

  get open(): boolean {
    return this.ws.readyState === WebSocket.OPEN;
  }

  send(kind: ClientKind, payload: object = {}): number {
    this.seq += 1;
    this.ws.send(encode(kind, this.seq, payload));
    return this.seq;
  }

  /** All messages received since the previous drain, oldest first. */
  drain(): Envelope[] {
    const batch = this.queue;
    this.queue = [];
    return batch;
  }

  close(): void {
    this.ws.close();
  }
}
