/** Stream ingestion over the server's HTTP API.
 *
 * Thin mode polls decoded snapshots; decode mode fetches raw per-frame
 * payloads and applies MOTION/KEYCORR locally (INIT semantics only at
 * join/resync). Either way the applied frame index is strictly increasing,
 * and any gap or fetch failure falls back to a snapshot resync. Ingestion
 * never blocks rendering: updates land in the shared SceneBuffer and flip
 * its dirty flag. */

import {
  StreamHeader,
  TAG_INIT,
  decodePayload,
  parseSnapshot,
} from "./protocol.js";
import { SceneBuffer } from "./scene.js";

export type ClientMode = "thin" | "decode";

export interface HeaderDoc {
  n_points: number;
  sh_degree: number;
  gof_interval: number;
  k: number;
  tau_adap: number;
  phi_thres: number;
  frame_count: number;
  current_frame: number;
  fps: number;
}

export interface ClientStats {
  mode: ClientMode;
  frame: number;
  frameCount: number;
  bytesReceived: number;
  resyncs: number;
  connected: boolean;
}

export class StreamClient {
  readonly stats: ClientStats;
  private header: StreamHeader | null = null;
  private buffer: SceneBuffer | null = null;
  private timer: ReturnType<typeof setInterval> | null = null;
  private pollBusy = false;
  private fps = 10;

  constructor(
    private baseUrl: string,
    private mode: ClientMode,
    private onScene: (buf: SceneBuffer) => void,
    private onStatus: (msg: string) => void = () => {},
  ) {
    this.stats = {
      mode,
      frame: -1,
      frameCount: 0,
      bytesReceived: 0,
      resyncs: 0,
      connected: false,
    };
  }

  async start(): Promise<void> {
    const doc = await this.fetchHeader();
    this.header = {
      nPoints: doc.n_points,
      shDegree: doc.sh_degree,
      gofInterval: doc.gof_interval,
      k: doc.k,
      tauAdap: doc.tau_adap,
      phiThres: doc.phi_thres,
      frameCount: doc.frame_count,
      version: 1,
    };
    this.fps = doc.fps;
    this.stats.frameCount = doc.frame_count;
    this.buffer = new SceneBuffer(doc.n_points);
    await this.resync(doc.current_frame);
    const period = Math.max(20, 1000 / Math.max(this.fps, 0.5));
    this.timer = setInterval(() => void this.poll(), period);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
    this.stats.connected = false;
  }

  private async fetchHeader(): Promise<HeaderDoc> {
    const resp = await fetch(`${this.baseUrl}/api/header`);
    if (!resp.ok) {
      throw new Error(`header fetch failed: ${resp.status}`);
    }
    return (await resp.json()) as HeaderDoc;
  }

  private async fetchBytes(path: string): Promise<Uint8Array | null> {
    const resp = await fetch(`${this.baseUrl}${path}`);
    if (resp.status === 404) {
      return null; // frame not available (yet or ever)
    }
    if (!resp.ok) {
      throw new Error(`${path}: ${resp.status}`);
    }
    const buf = new Uint8Array(await resp.arrayBuffer());
    this.stats.bytesReceived += buf.length;
    return buf;
  }

  /** Reset local state from the server's decoded snapshot at `frame`. */
  private async resync(frame: number): Promise<void> {
    const raw = await this.fetchBytes(`/api/snapshot/${frame}`);
    if (raw === null) {
      throw new Error(`snapshot ${frame} unavailable`);
    }
    const snap = parseSnapshot(raw);
    this.buffer!.setPlanes(snap.scene, snap.frame);
    this.stats.frame = snap.frame;
    this.stats.connected = true;
    this.stats.resyncs += 1;
    this.onScene(this.buffer!);
    this.onStatus(`synced at frame ${snap.frame}`);
  }

  private async poll(): Promise<void> {
    if (this.pollBusy || !this.buffer || !this.header) {
      return;
    }
    this.pollBusy = true;
    try {
      const next = this.stats.frame + 1;
      if (this.header.frameCount && next >= this.header.frameCount) {
        this.onStatus(`end of stream at frame ${this.stats.frame}`);
        this.stop();
        return;
      }
      if (this.mode === "thin") {
        const raw = await this.fetchBytes(`/api/snapshot/${next}`);
        if (raw === null) {
          return; // not yet paced to this frame
        }
        const snap = parseSnapshot(raw);
        if (snap.frame <= this.stats.frame) {
          return; // never move backwards
        }
        this.buffer.setPlanes(snap.scene, snap.frame);
        this.stats.frame = snap.frame;
      } else {
        const raw = await this.fetchBytes(`/api/payload/${next}`);
        if (raw === null) {
          return;
        }
        if (raw.length < 5) {
          throw new Error("short wire message");
        }
        const tag = raw[4];
        const payload = decodePayload(tag, raw.subarray(5), this.header);
        if (payload.tag === TAG_INIT && this.stats.frame >= 0 && next > 0) {
          throw new Error("INIT after session start");
        }
        this.buffer.apply(payload, next);
        this.stats.frame = next;
      }
      this.stats.connected = true;
      this.onScene(this.buffer);
    } catch (err) {
      this.stats.connected = false;
      this.onStatus(`stream error: ${String(err)}; resyncing`);
      try {
        const doc = await this.fetchHeader();
        await this.resync(doc.current_frame);
      } catch {
        // server unreachable; next tick retries
      }
    } finally {
      this.pollBusy = false;
    }
  }
}
