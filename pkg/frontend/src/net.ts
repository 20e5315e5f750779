// Websocket client: parse inbound messages into the store, queue outbound
// client messages, and surface connection status.

import { ClientMsg, parseServerMsg } from "./protocol.js";
import { StateStore } from "./store.js";

export interface Connection {
  send(msg: ClientMsg): boolean;
  close(): void;
}

export function connect(
  url: string,
  store: StateStore,
  WS: typeof WebSocket = WebSocket
): Connection {
  const ws = new WS(url);
  ws.onopen = () => store.setConnected(true);
  ws.onclose = () => store.setConnected(false);
  ws.onerror = () => store.setConnected(false);
  ws.onmessage = (ev: MessageEvent) => {
    const msg = parseServerMsg(String(ev.data));
    if (msg === null) {
      store.reportError("malformed server message");
      return;
    }
    store.accept(msg);
  };
  return {
    send(msg: ClientMsg): boolean {
      if (ws.readyState !== 1 /* OPEN */) return false;
      ws.send(JSON.stringify(msg));
      return true;
    },
    close() {
      ws.close();
    },
  };
}
