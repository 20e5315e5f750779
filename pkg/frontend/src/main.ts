// Browser entry point: wires keyboard capture, the websocket client, and the
// canvas renderer together.

import { DEFAULT_INPUT, InputMapper } from "./input.js";
import { connect } from "./net.js";
import { SceneRenderer } from "./render.js";
import { StateStore } from "./store.js";

function start(): void {
  const canvas = document.getElementById("scene") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("no 2d context");
  const store = new StateStore();
  const renderer = new SceneRenderer(ctx, canvas.width, canvas.height);
  const mapper = new InputMapper(DEFAULT_INPUT);
  const held = new Set<string>();
  let assist = false;
  let recording = false;

  const proto = location.protocol === "https:" ? "wss" : "ws";
  const conn = connect(`${proto}://${location.host}/ws`, store);

  document.addEventListener("keydown", (e) => {
    const k = e.key.toLowerCase();
    if (k === "g") {
      mapper.toggleGrip();
      conn.send(mapper.gripMessage());
    } else if (k === "t") {
      assist = !assist;
      conn.send({ type: "assist", enabled: assist });
    } else if (k === "y") {
      recording = !recording;
      conn.send({ type: "record", enabled: recording });
    } else if (k === "n") {
      conn.send({ type: "reset", seed: Math.floor(Math.random() * 1e6) });
    } else {
      held.add(k);
      e.preventDefault();
    }
  });
  document.addEventListener("keyup", (e) => held.delete(e.key.toLowerCase()));
  window.addEventListener("blur", () => held.clear());

  // stream inputs at ~2x the server tick rate; the server applies
  // latest-wins per tick
  setInterval(() => {
    const msg = mapper.build(held);
    if (msg) conn.send(msg);
  }, 33);

  const loop = () => {
    renderer.render(store.view.state, store.view.config, {
      connected: store.view.connected,
      error: store.view.lastError,
      eventLog: store.view.eventLog,
    });
    requestAnimationFrame(loop);
  };
  requestAnimationFrame(loop);
}

start();
