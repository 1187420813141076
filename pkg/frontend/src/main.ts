import { AppElements, StudioApp } from './app.js';
import { GatewayClient } from './client.js';

function grab<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

const elements: AppElements = {
  display: grab<HTMLCanvasElement>('display'),
  overlay: grab<HTMLCanvasElement>('overlay'),
  file: grab<HTMLInputElement>('frame-file'),
  latency: grab('latency'),
  model: grab('model-tag'),
  countdown: grab('countdown'),
  status: grab('status'),
};

const app = new StudioApp(elements, new GatewayClient());
app.bind();
