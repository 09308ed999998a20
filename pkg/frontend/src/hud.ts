/** Heads-up readout: frame index, point count, bandwidth, render rate. */

import { ClientStats } from "./client.js";

export class Hud {
  readonly element: HTMLDivElement;
  private frames = 0;
  private lastFpsAt = performance.now();
  private fps = 0;
  private lastBytes = 0;
  private lastRateAt = performance.now();
  private rate = 0;

  constructor(parent: HTMLElement) {
    this.element = document.createElement("div");
    this.element.className = "hud";
    parent.appendChild(this.element);
  }

  /** Call once per rendered frame. */
  tick(): void {
    this.frames += 1;
    const now = performance.now();
    if (now - this.lastFpsAt >= 500) {
      this.fps = (this.frames * 1000) / (now - this.lastFpsAt);
      this.frames = 0;
      this.lastFpsAt = now;
    }
  }

  update(stats: ClientStats, nPoints: number): void {
    const now = performance.now();
    if (now - this.lastRateAt >= 1000) {
      this.rate = ((stats.bytesReceived - this.lastBytes) * 1000) / (now - this.lastRateAt);
      this.lastBytes = stats.bytesReceived;
      this.lastRateAt = now;
    }
    const state = stats.connected ? "live" : "reconnecting";
    this.element.textContent =
      `frame ${stats.frame}/${Math.max(stats.frameCount - 1, 0)} | ` +
      `${nPoints} splats | ${formatRate(this.rate)} | ` +
      `${this.fps.toFixed(0)} fps | ${stats.mode} | ${state}`;
  }
}

function formatRate(bytesPerSec: number): string {
  if (bytesPerSec >= 1024 * 1024) {
    return `${(bytesPerSec / 1024 / 1024).toFixed(1)} MiB/s`;
  }
  if (bytesPerSec >= 1024) {
    return `${(bytesPerSec / 1024).toFixed(1)} KiB/s`;
  }
  return `${bytesPerSec.toFixed(0)} B/s`;
}
