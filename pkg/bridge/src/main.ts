import { serve } from "./bridge.js";
import { DEMO_INFO, demoModel } from "./demoModel.js";

await serve(demoModel, DEMO_INFO);
