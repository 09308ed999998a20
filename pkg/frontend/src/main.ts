/** Viewer entry point: canvas + orbit input + stream client + HUD.
 *
 * Query parameters:
 *   ?mode=thin|decode   snapshot polling (default) or client-side decoding
 *   ?server=http://...  stream server origin (default: page origin)
 */

import { OrbitCamera } from "./camera.js";
import { ClientMode, StreamClient } from "./client.js";
import { Hud } from "./hud.js";
import { SplatRenderer } from "./render.js";
import { SceneBuffer } from "./scene.js";

function main(): void {
  const app = document.getElementById("app");
  if (!app) {
    throw new Error("app root not found");
  }
  const canvas = document.createElement("canvas");
  canvas.id = "view";
  app.appendChild(canvas);
  const hud = new Hud(app);
  const status = document.createElement("div");
  status.className = "status";
  app.appendChild(status);

  const params = new URLSearchParams(location.search);
  const mode = (params.get("mode") === "decode" ? "decode" : "thin") as ClientMode;
  const server = params.get("server") ?? "";

  const camera = new OrbitCamera();
  const renderer = new SplatRenderer(canvas);
  let scene: SceneBuffer | null = null;

  const client = new StreamClient(
    server,
    mode,
    (buf) => {
      scene = buf;
    },
    (msg) => {
      status.textContent = msg;
    },
  );
  client.start().catch((err) => {
    status.textContent = `cannot reach stream server: ${String(err)}`;
  });

  // pointer input: drag orbits, shift-drag pans, wheel zooms
  let dragging = false;
  let panning = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("pointerdown", (e) => {
    dragging = true;
    panning = e.shiftKey || e.button === 2;
    lastX = e.clientX;
    lastY = e.clientY;
    canvas.setPointerCapture(e.pointerId);
  });
  canvas.addEventListener("pointermove", (e) => {
    if (!dragging) {
      return;
    }
    const dx = e.clientX - lastX;
    const dy = e.clientY - lastY;
    lastX = e.clientX;
    lastY = e.clientY;
    if (panning) {
      camera.pan(dx / canvas.clientHeight, dy / canvas.clientHeight);
    } else {
      camera.orbit(-dx * 0.008, dy * 0.008);
    }
  });
  canvas.addEventListener("pointerup", () => {
    dragging = false;
  });
  canvas.addEventListener("contextmenu", (e) => e.preventDefault());
  canvas.addEventListener(
    "wheel",
    (e) => {
      e.preventDefault();
      camera.zoom(Math.exp(e.deltaY * 0.001));
    },
    { passive: false },
  );
  window.addEventListener("keydown", (e) => {
    const step = 0.05;
    if (e.key === "ArrowLeft") camera.orbit(step, 0);
    if (e.key === "ArrowRight") camera.orbit(-step, 0);
    if (e.key === "ArrowUp") camera.orbit(0, step);
    if (e.key === "ArrowDown") camera.orbit(0, -step);
  });

  const frame = () => {
    if (scene && scene.n > 0) {
      renderer.draw(scene, camera);
      scene.dirty = false;
    }
    hud.tick();
    hud.update(client.stats, scene ? scene.n : 0);
    requestAnimationFrame(frame);
  };
  requestAnimationFrame(frame);
}

main();
