// Latest-state buffer decoupling network receipt from rendering.
// The rendered tick never decreases; stale or malformed packets are dropped.

import { ConfigMsg, ServerMsg, StateMsg } from "./protocol.js";

export interface SessionView {
  config: ConfigMsg | null;
  state: StateMsg | null;
  connected: boolean;
  lastError: string | null;
  eventLog: string[];
}

export class StateStore {
  view: SessionView = {
    config: null,
    state: null,
    connected: false,
    lastError: null,
    eventLog: [],
  };

  private listeners: Array<(v: SessionView) => void> = [];

  subscribe(fn: (v: SessionView) => void): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn(this.view);
  }

  setConnected(connected: boolean): void {
    this.view.connected = connected;
    this.emit();
  }

  reportError(message: string): void {
    this.view.lastError = message;
    this.emit();
  }

  /** Accept a parsed message; stale ticks are ignored. Returns acceptance. */
  accept(msg: ServerMsg): boolean {
    if (msg.type === "config") {
      this.view.config = msg;
      this.view.state = null;
      this.emit();
      return true;
    }
    const prev = this.view.state;
    if (prev && msg.tick <= prev.tick) {
      return false;
    }
    this.view.state = msg;
    this.view.lastError = null;
    for (const ev of msg.events) {
      this.view.eventLog.push(`tick ${msg.tick}: ${ev}`);
      if (this.view.eventLog.length > 8) this.view.eventLog.shift();
    }
    this.emit();
    return true;
  }
}
